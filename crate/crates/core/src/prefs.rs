//! Action-contrastive preference data: for every system-side turn the gold
//! response wins and a response generated for the complementary action loses.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::generator::{ConditionalGenerator, GENERATE_SHOTS};
use crate::clients::DecodingSettings;
use crate::conversation::{digest_bytes, to_jsonl, write_jsonl, ConversationTurnState, PreferencePair};
use crate::error::{Error, Result};

pub const PAIRS_FILE: &str = "prefs.jsonl";
pub const MANIFEST_FILE: &str = "prefs_manifest.json";

/// Generator settings recorded alongside the pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub decoding: DecodingSettings,
    pub shots: usize,
    pub template_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    /// Digest of the serialized input states.
    pub source_digest: String,
    pub build_config: BuildConfig,
    /// Input indices of turns dropped after a degenerate resample.
    pub dropped: Vec<usize>,
    /// Turns whose first generation was degenerate, dropped ones included.
    pub resampled: usize,
}

impl PreferenceDataset {
    pub fn digest(&self) -> Result<String> {
        Ok(digest_bytes(&to_jsonl(&self.pairs)?))
    }

    pub fn dropped_fraction(&self) -> f64 {
        let total = self.pairs.len() + self.dropped.len();
        if total == 0 {
            0.0
        } else {
            self.dropped.len() as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildStatus {
    Complete,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefManifest {
    pub status: BuildStatus,
    pub input_turns: usize,
    pub pairs: usize,
    pub dropped: Vec<usize>,
    pub dropped_fraction: f64,
    pub resampled: usize,
    pub source_digest: String,
    pub pairs_digest: String,
    pub build_config: BuildConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn source_digest(data: &[ConversationTurnState]) -> Result<String> {
    Ok(digest_bytes(&to_jsonl(data)?))
}

enum TurnOutcome {
    Pair(Box<PreferencePair>, bool),
    Dropped,
}

fn is_degenerate(losing: &str, winning: &str) -> bool {
    losing.trim().is_empty() || losing.trim() == winning.trim()
}

fn build_turn(state: &ConversationTurnState, generator: &ConditionalGenerator) -> Result<TurnOutcome> {
    let rejected = state.gold_action.complement();
    let mut resampled = false;
    for attempt in 0..2 {
        let text = match generator.generate_losing_response(state, rejected) {
            Ok(t) => t,
            Err(Error::DegenerateGeneration(_)) => String::new(),
            Err(e) => return Err(e),
        };
        if !is_degenerate(&text, &state.gold_response) {
            return Ok(TurnOutcome::Pair(
                Box::new(PreferencePair::offline(state.clone(), text)?),
                resampled,
            ));
        }
        if attempt == 0 {
            resampled = true;
        }
    }
    Ok(TurnOutcome::Dropped)
}

fn build_config(generator: &ConditionalGenerator) -> BuildConfig {
    BuildConfig {
        decoding: generator.decoding.clone(),
        shots: GENERATE_SHOTS,
        template_digest: generator.registry().digest(),
    }
}

/// Per-turn results in input order. On a backend failure the completed
/// prefix is returned together with the error.
fn build_ordered(
    data: &[ConversationTurnState],
    generator: &ConditionalGenerator,
) -> (PreferenceDataset, Option<Error>) {
    let outcomes: Vec<Result<TurnOutcome>> = data.par_iter().map(|s| build_turn(s, generator)).collect();
    let mut ds = PreferenceDataset {
        pairs: Vec::new(),
        source_digest: String::new(),
        build_config: build_config(generator),
        dropped: Vec::new(),
        resampled: 0,
    };
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(TurnOutcome::Pair(p, resampled)) => {
                ds.pairs.push(*p);
                ds.resampled += usize::from(resampled);
            }
            Ok(TurnOutcome::Dropped) => {
                log::warn!("dropping turn {i}: degenerate losing response after one resample");
                ds.dropped.push(i);
                ds.resampled += 1;
            }
            Err(e) => return (ds, Some(e)),
        }
    }
    (ds, None)
}

pub fn build_preference_dataset(
    data: &[ConversationTurnState],
    generator: &ConditionalGenerator,
) -> Result<PreferenceDataset> {
    let digest = source_digest(data)?;
    let (mut ds, err) = build_ordered(data, generator);
    if let Some(e) = err {
        return Err(e);
    }
    ds.source_digest = digest;
    if !ds.dropped.is_empty() {
        log::warn!("dropped {} of {} turns", ds.dropped.len(), data.len());
    }
    Ok(ds)
}

fn manifest(ds: &PreferenceDataset, input_turns: usize, error: Option<&Error>) -> Result<PrefManifest> {
    Ok(PrefManifest {
        status: if error.is_some() {
            BuildStatus::Aborted
        } else {
            BuildStatus::Complete
        },
        input_turns,
        pairs: ds.pairs.len(),
        dropped: ds.dropped.clone(),
        dropped_fraction: ds.dropped_fraction(),
        resampled: ds.resampled,
        source_digest: ds.source_digest.clone(),
        pairs_digest: ds.digest()?,
        build_config: ds.build_config.clone(),
        error: error.map(|e| e.to_string()),
    })
}

/// Builds and writes the pairs file and manifest into `dir`. A backend
/// failure still writes the completed prefix with an aborted manifest.
pub fn build_and_write(
    data: &[ConversationTurnState],
    generator: &ConditionalGenerator,
    dir: &Path,
) -> Result<PreferenceDataset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    let digest = source_digest(data)?;
    let (mut ds, err) = build_ordered(data, generator);
    ds.source_digest = digest;
    write_jsonl(&dir.join(PAIRS_FILE), &ds.pairs)?;
    let m = manifest(&ds, data.len(), err.as_ref())?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&m)?)
        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    match err {
        Some(e) => Err(e),
        None => Ok(ds),
    }
}

/// Reads a pairs file written by [`build_and_write`] and checks every pair.
pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let pairs: Vec<PreferencePair> = crate::conversation::read_jsonl(path)?;
    for p in &pairs {
        p.validate()?;
    }
    Ok(pairs)
}

pub fn read_manifest(dir: &Path) -> Result<PrefManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}
