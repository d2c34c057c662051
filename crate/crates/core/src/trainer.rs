//! Quasi-online action-contrastive training.
//!
//! Each step draws a batch of dataset pairs, samples a response from the
//! current policy for every pair, and reassigns one side of the pair:
//!
//! | sampled action | rollout outcome       | reassignment                 |
//! |----------------|-----------------------|------------------------------|
//! | ≠ gold         | not simulated         | losing ← sampled response    |
//! | = gold         | H(outcome, goal) > ε  | winning ← trajectory         |
//! | = gold         | H ≤ ε or cap exceeded | losing ← trajectory          |
//!
//! Reassignments only live for the step they were made in; the dataset
//! itself never changes. The parameters are updated once per batch.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clients::{ActionClassifier, UserSimulator};
use crate::conversation::{
    digest_bytes, extend_state, Action, ConversationTurnState, DialogueMessage, PairOrigin, PreferencePair,
    Provenance, Response, Speaker, Trajectory,
};
use crate::dpo::{apply_update, dpo_gradient, reward_margin, DpoConfig, OptimizerState, StepRecord};
use crate::error::{Error, Result};
use crate::metrics::heuristic::{default_epsilon, Heuristic};
use crate::policy::{Checkpoint, Policy, ReferenceSnapshot, TrainablePolicy};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainMode {
    FullAct,
    NoSampling,
    SamplingNoSimulation,
    RandomActions,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase()))
            .map_err(|_| Error::Config(format!("unknown training mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActConfig {
    pub num_batches: usize,
    pub heuristic_id: String,
    /// Defaults per heuristic when unset.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_cap")]
    pub max_clarify_rounds: usize,
    #[serde(default)]
    pub sampling_seed: u64,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
}

fn default_cap() -> usize {
    5
}
fn default_mode() -> TrainMode {
    TrainMode::FullAct
}
fn default_epochs() -> usize {
    12
}

pub const MAX_EPOCHS: usize = 12;

impl ActConfig {
    pub fn new(num_batches: usize, heuristic_id: &str, mode: TrainMode, seed: u64) -> Self {
        ActConfig {
            num_batches,
            heuristic_id: heuristic_id.to_string(),
            epsilon: None,
            max_clarify_rounds: default_cap(),
            sampling_seed: seed,
            mode,
            max_epochs: default_epochs(),
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(&self.heuristic_id))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_batches == 0 {
            return Err(Error::Config("num_batches must be at least 1".into()));
        }
        if self.max_clarify_rounds == 0 {
            return Err(Error::Config("max_clarify_rounds must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return Err(Error::Config(format!("max_epochs must be in 1..={MAX_EPOCHS}")));
        }
        if let Some(e) = self.epsilon {
            if !e.is_finite() {
                return Err(Error::Config("epsilon must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Deterministic sub-seed for a position in the run.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut bytes = base.to_le_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let digest = digest_bytes(&bytes);
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Everything the loop calls out to besides the policy.
#[derive(Clone, Copy)]
pub struct Oracles<'a> {
    pub classifier: &'a dyn ActionClassifier,
    pub simulator: &'a dyn UserSimulator,
    pub heuristic: &'a dyn Heuristic,
}

/// Continues a conversation from `first_response` until the policy answers
/// or has asked `cap` clarifying questions.
pub fn roll_out_trajectory(
    policy: &dyn Policy,
    state: &ConversationTurnState,
    first_response: &str,
    classifier: &dyn ActionClassifier,
    simulator: &dyn UserSimulator,
    cap: usize,
    seed: u64,
) -> Result<Trajectory> {
    if cap == 0 {
        return Err(Error::Precondition("clarify round cap must be at least 1".into()));
    }
    let sys = |t: &str| DialogueMessage::with_provenance(Speaker::System, t, Provenance::PolicySampled);
    let mut messages = vec![sys(first_response)?];
    if classifier.classify(state, first_response)? == Action::Answer {
        return Trajectory::new(messages, 0, false);
    }
    let intent = simulator.summarize_intent(state)?;
    let mut rounds = 1;
    let mut context = state.clone();
    loop {
        if rounds == cap {
            return Trajectory::new(messages, rounds, true);
        }
        let asked = &messages[messages.len() - 1].text;
        let reply = simulator.simulate_user_turn(&context, &intent, asked)?;
        messages.push(DialogueMessage::with_provenance(
            Speaker::User,
            reply,
            Provenance::SimulatedUser,
        )?);
        context = extend_state(state, &messages)?;
        let next = policy.sample_response(&context, derive_seed(seed, &[rounds as u64]))?;
        let action = classifier.classify(&context, &next)?;
        messages.push(sys(&next)?);
        if action == Action::Answer {
            return Trajectory::new(messages, rounds, false);
        }
        rounds += 1;
    }
}

/// Reassigns one side of `pair` from an on-policy sample. `traj` and
/// `h_score` are present exactly when the sample's action matched gold.
/// A replacement identical to the other side leaves the pair unchanged.
pub fn assign_pair(
    pair: &PreferencePair,
    sampled: &str,
    traj: Option<Trajectory>,
    h_score: Option<f64>,
    epsilon: f64,
) -> Result<PreferencePair> {
    let mut out = pair.clone();
    match (traj, h_score) {
        (None, None) => {
            out.losing = Response::Text(sampled.to_string());
            out.origin = PairOrigin::OnpolicyLossReplaced;
        }
        (Some(mut t), Some(h)) => {
            if h > epsilon && !t.cap_exceeded {
                t.success = Some(true);
                out.winning = Response::Trajectory(t);
                out.origin = PairOrigin::OnpolicyWinReplaced;
            } else {
                t.success = Some(false);
                out.losing = Response::Trajectory(t);
                out.origin = PairOrigin::OnpolicyLossReplaced;
            }
        }
        (None, Some(_)) => {
            return Err(Error::Contract("matched-action branch needs a trajectory".into()));
        }
        (Some(_), None) => {
            return Err(Error::Contract("trajectory given without a heuristic score".into()));
        }
    }
    if out.validate().is_err() {
        log::debug!("on-policy replacement would duplicate the other side; pair kept");
        return Ok(pair.clone());
    }
    Ok(out)
}

/// Randomized action labels: each pair's gold action is redrawn, and the
/// winning and losing sides swap whenever it flips.
pub fn randomize_actions(pairs: &[PreferencePair], seed: u64) -> Result<Vec<PreferencePair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
    pairs
        .iter()
        .map(|p| {
            let flip = rng.random::<bool>();
            if !flip {
                return Ok(p.clone());
            }
            let losing = p.losing.as_text().ok_or_else(|| {
                Error::Contract("randomized actions need text losing responses".into())
            })?;
            let mut state = p.state.clone();
            state.gold_action = p.state.gold_action.complement();
            state.gold_response = losing.to_string();
            let out = PreferencePair {
                state,
                rejected_action: p.state.gold_action,
                winning: p.losing.clone(),
                losing: p.winning.clone(),
                origin: PairOrigin::Offline,
            };
            out.validate()?;
            Ok(out)
        })
        .collect()
}

/// One on-policy reassignment, with the replaced losing response's score
/// under the policy before and after the batch update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementEvent {
    pub step: u64,
    pub pair_index: usize,
    pub origin: PairOrigin,
    pub sampled: String,
    pub sampled_action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losing_logprob_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losing_logprob_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub step: StepRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_margin: Option<f64>,
    pub replacements: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where metrics, events and checkpoints go; nothing is written when unset.
    pub run_dir: Option<PathBuf>,
    pub config_digest: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub epochs: usize,
    /// Step of the returned parameters; 0 is the initial policy.
    pub selected_step: u64,
    pub selected_margin: Option<f64>,
    pub final_parameters: Vec<f64>,
    pub records: Vec<TrainRecord>,
    pub events: Vec<ReplacementEvent>,
}

struct Assigned {
    pair: PreferencePair,
    event: Option<ReplacementEvent>,
}

#[allow(clippy::too_many_arguments)]
fn reassign(
    policy: &dyn Policy,
    pair: &PreferencePair,
    index: usize,
    step: u64,
    mode: TrainMode,
    oracles: Oracles<'_>,
    cfg: &ActConfig,
    seed: u64,
) -> Result<Assigned> {
    if mode == TrainMode::NoSampling {
        return Ok(Assigned {
            pair: pair.clone(),
            event: None,
        });
    }
    let state = &pair.state;
    let sampled = policy.sample_response(state, seed)?;
    let action = oracles.classifier.classify(state, &sampled)?;
    let (assigned, h) = if action != state.gold_action {
        (assign_pair(pair, &sampled, None, None, cfg.epsilon())?, None)
    } else if mode == TrainMode::SamplingNoSimulation {
        return Ok(Assigned {
            pair: pair.clone(),
            event: None,
        });
    } else {
        let traj = roll_out_trajectory(
            policy,
            state,
            &sampled,
            oracles.classifier,
            oracles.simulator,
            cfg.max_clarify_rounds,
            derive_seed(seed, &[1]),
        )?;
        let h = oracles.heuristic.score(state, &traj.outcome, &state.trajectory_goal)?;
        (assign_pair(pair, &sampled, Some(traj), Some(h), cfg.epsilon())?, Some(h))
    };
    let event = (assigned.origin != pair.origin).then(|| ReplacementEvent {
        step,
        pair_index: index,
        origin: assigned.origin,
        sampled: sampled.clone(),
        sampled_action: action,
        h_score: h,
        losing_logprob_before: None,
        losing_logprob_after: None,
    });
    Ok(Assigned { pair: assigned, event })
}

fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    f.write_all(&line).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

fn save_checkpoint(dir: &Path, name: &str, policy: &dyn TrainablePolicy, digest: &str, space: &str) -> Result<()> {
    Checkpoint::new(digest, space, policy.parameters().to_vec()).save(&dir.join(name))
}

/// Runs the training loop on `policy` in place. On return `policy` holds
/// the parameters with the best validation reward margin, or the final ones
/// when `validation` is empty.
#[allow(clippy::too_many_arguments)]
pub fn act_train(
    policy: &mut dyn TrainablePolicy,
    candidate_space: &str,
    dataset: &[PreferencePair],
    validation: &[PreferencePair],
    oracles: Oracles<'_>,
    cfg: &ActConfig,
    dpo_cfg: &DpoConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dpo_cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training needs at least one preference pair".into()));
    }
    for p in dataset.iter().chain(validation) {
        p.validate()?;
    }
    if let Some(dir) = &options.run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        for f in [METRICS_FILE, EVENTS_FILE] {
            std::fs::write(dir.join(f), b"").map_err(|e| Error::io(format!("truncate {f}"), e))?;
        }
    }
    let (pairs, mode) = match cfg.mode {
        TrainMode::RandomActions => (randomize_actions(dataset, cfg.sampling_seed)?, TrainMode::FullAct),
        m => (dataset.to_vec(), m),
    };
    let reference: ReferenceSnapshot = policy.snapshot();
    let mut opt = OptimizerState::new(policy.parameters().len());
    if validation.is_empty() {
        log::warn!("no validation pairs; the final parameters will be returned");
    }
    let mut best: Option<(f64, u64, Vec<f64>)> = if validation.is_empty() {
        None
    } else {
        let m = reward_margin(validation, &*policy, &reference, dpo_cfg.beta)?;
        Some((m, 0, policy.parameters().to_vec()))
    };
    let mut records = Vec::new();
    let mut events = Vec::new();
    let mut step: u64 = 0;
    let mut epochs = 0;
    'epochs: for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.sampling_seed, &[epoch as u64])));
        for chunk in order.chunks(dpo_cfg.batch_size) {
            if step as usize >= cfg.num_batches {
                break 'epochs;
            }
            step += 1;
            let assigned: Vec<Assigned> = chunk
                .par_iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let seed = derive_seed(cfg.sampling_seed, &[step, pos as u64]);
                    reassign(&*policy, &pairs[i], i, step, mode, oracles, cfg, seed)
                })
                .collect::<Result<_>>()?;
            let batch: Vec<PreferencePair> = assigned.iter().map(|a| a.pair.clone()).collect();
            let mut step_events: Vec<(usize, ReplacementEvent)> = Vec::new();
            for (k, a) in assigned.into_iter().enumerate() {
                if let Some(mut e) = a.event {
                    if e.origin == PairOrigin::OnpolicyLossReplaced {
                        e.losing_logprob_before = Some(policy.response_logprob(&batch[k].state, &batch[k].losing)?);
                    }
                    step_events.push((k, e));
                }
            }
            let g = dpo_gradient(&batch, &*policy, &reference, dpo_cfg.beta)?;
            apply_update(policy, &g.grad, dpo_cfg, &mut opt)?;
            for (k, e) in step_events.iter_mut() {
                if e.losing_logprob_before.is_some() {
                    e.losing_logprob_after = Some(policy.response_logprob(&batch[*k].state, &batch[*k].losing)?);
                }
            }
            let validation_margin = if validation.is_empty() {
                None
            } else {
                Some(reward_margin(validation, &*policy, &reference, dpo_cfg.beta)?)
            };
            if let (Some(m), Some(b)) = (validation_margin, best.as_mut()) {
                if m > b.0 {
                    *b = (m, step, policy.parameters().to_vec());
                }
            }
            let record = TrainRecord {
                epoch,
                step: StepRecord {
                    step,
                    loss: g.loss,
                    margin: g.margin,
                    weight_mean: g.weight_mean(),
                },
                validation_margin,
                replacements: step_events.len(),
            };
            if let Some(dir) = &options.run_dir {
                append_jsonl(&dir.join(METRICS_FILE), &record)?;
                for (_, e) in &step_events {
                    append_jsonl(&dir.join(EVENTS_FILE), e)?;
                }
            }
            records.push(record);
            events.extend(step_events.into_iter().map(|(_, e)| e));
        }
    }
    let final_parameters = policy.parameters().to_vec();
    if let Some(dir) = &options.run_dir {
        save_checkpoint(dir, FINAL_CHECKPOINT, &*policy, &options.config_digest, candidate_space)?;
    }
    let (selected_step, selected_margin) = match best {
        Some((m, s, theta)) => {
            policy.set_parameters(theta)?;
            (s, Some(m))
        }
        None => (step, None),
    };
    if let Some(dir) = &options.run_dir {
        save_checkpoint(dir, BEST_CHECKPOINT, &*policy, &options.config_digest, candidate_space)?;
    }
    Ok(TrainOutcome {
        steps: step,
        epochs,
        selected_step,
        selected_margin,
        final_parameters,
        records,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{RuleClassifier, ScriptTable, ScriptedSimulator};
    use crate::policy::candidates::{FixedCandidates, YEAR_QUESTION};
    use crate::policy::{PolicyDecoding, ToyPolicy};
    use crate::prompts::{PromptRegistry, STANDARD};
    use std::sync::Arc;

    fn state(gold: &str, action: Action) -> ConversationTurnState {
        ConversationTurnState::single_goal(
            "[Table] total liabilities\nentity: IMFT\n2019 | $909\n2018 | $1,305",
            vec![DialogueMessage::user("What were the total liabilities of IMFT?").unwrap()],
            gold,
            "$1,305",
            action,
        )
        .unwrap()
    }

    fn policy(theta: Vec<f64>) -> ToyPolicy {
        let space = FixedCandidates::new(vec![
            (YEAR_QUESTION.into(), Action::Clarify),
            ("$1,305".into(), Action::Answer),
            ("$909".into(), Action::Answer),
        ])
        .unwrap();
        ToyPolicy::new(
            Arc::new(space),
            Arc::new(PromptRegistry::builtin()),
            STANDARD,
            PolicyDecoding::default(),
        )
        .unwrap()
        .with_parameters(theta)
        .unwrap()
    }

    fn simulator() -> ScriptedSimulator {
        let mut replies = ScriptTable::new();
        replies.insert("$1,305", "2018");
        ScriptedSimulator::goal_grounded(replies)
    }

    #[test]
    fn answer_first_is_single_message() {
        let p = policy(vec![0.0; 5]);
        let t = roll_out_trajectory(&p, &state("x", Action::Answer), "$909", &RuleClassifier, &simulator(), 5, 0).unwrap();
        assert_eq!(t.messages.len(), 1);
        assert_eq!(t.clarify_rounds, 0);
    }

    #[test]
    fn always_clarifying_hits_cap() {
        let ninf = f64::NEG_INFINITY;
        let p = policy(vec![0.0, 0.0, 0.0, ninf, ninf]);
        let t = roll_out_trajectory(&p, &state("x", Action::Clarify), YEAR_QUESTION, &RuleClassifier, &simulator(), 3, 0).unwrap();
        assert!(t.cap_exceeded);
        assert_eq!(t.clarify_rounds, 3);
        assert_eq!(t.messages.len(), 5);
    }

    #[test]
    fn clarify_then_answer() {
        let ninf = f64::NEG_INFINITY;
        // only "$1,305" is reachable, so the first clarification must be given by hand
        let p = policy(vec![0.0, 0.0, ninf, 0.0, ninf]);
        let t = roll_out_trajectory(&p, &state("x", Action::Clarify), YEAR_QUESTION, &RuleClassifier, &simulator(), 5, 0).unwrap();
        assert_eq!(t.clarify_rounds, 1);
        assert_eq!(t.messages[1].text, "2018");
        assert_eq!(t.outcome, "$1,305");
        assert!(!t.cap_exceeded);
    }

    #[test]
    fn assignment_branches() {
        let pair = PreferencePair::offline(state(YEAR_QUESTION, Action::Clarify), "$909").unwrap();
        let a = assign_pair(&pair, "$1,305", None, None, 0.5).unwrap();
        assert_eq!(a.losing, Response::Text("$1,305".into()));
        assert_eq!(a.origin, PairOrigin::OnpolicyLossReplaced);
        assert_eq!(a.winning, pair.winning);

        let traj = Trajectory::single("$909", Provenance::PolicySampled).unwrap();
        let good = assign_pair(&pair, "q", Some(traj.clone()), Some(1.0), 0.5).unwrap();
        assert_eq!(good.origin, PairOrigin::OnpolicyWinReplaced);
        assert_eq!(good.losing, pair.losing);
        let bad = assign_pair(&pair, "q", Some(traj.clone()), Some(0.0), 0.8).unwrap();
        assert_eq!(bad.origin, PairOrigin::OnpolicyLossReplaced);
        assert_eq!(bad.winning, pair.winning);
        assert!(matches!(assign_pair(&pair, "q", None, Some(1.0), 0.5), Err(Error::Contract(_))));
        assert!(matches!(assign_pair(&pair, "q", Some(traj), None, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn random_actions_swap_sides() {
        let pairs: Vec<_> = (0..20)
            .map(|_| PreferencePair::offline(state(YEAR_QUESTION, Action::Clarify), "$909").unwrap())
            .collect();
        let r = randomize_actions(&pairs, 3).unwrap();
        let flipped = r.iter().filter(|p| p.state.gold_action == Action::Answer).count();
        assert!(flipped > 0 && flipped < 20);
        for p in r.iter().filter(|p| p.state.gold_action == Action::Answer) {
            assert_eq!(p.winning.as_text(), Some("$909"));
            assert_eq!(p.rejected_action, Action::Clarify);
        }
        assert_eq!(r, randomize_actions(&pairs, 3).unwrap());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full_act".parse::<TrainMode>().unwrap(), TrainMode::FullAct);
        assert_eq!("SAMPLING_NO_SIMULATION".parse::<TrainMode>().unwrap(), TrainMode::SamplingNoSimulation);
        assert!("nope".parse::<TrainMode>().is_err());
    }
}
