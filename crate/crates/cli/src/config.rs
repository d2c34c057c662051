//! Run configuration: a TOML document with named hyperparameter profiles.
//!
//! Relative paths resolve against the config file's directory. Only backend
//! credentials come from the environment (see `auth_env_var`).

use std::path::{Path, PathBuf};

use act_core::clients::{DecodingSettings, Grounding, ModelBackendConfig};
use act_core::conversation::digest_bytes;
use act_core::dpo::{DpoConfig, OptimizerKind};
use act_core::eval::{EvalProtocol, TaskKind};
use act_core::metrics::heuristic::registered_ids;
use act_core::policy::PolicyDecoding;
use act_core::prompts::{ABGCOQA, AMBIGSQL, PACIFIC, STANDARD};
use act_core::trainer::{ActConfig, TrainMode, MAX_EPOCHS};
use act_core::ambigsql::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const PROFILES: [&str; 5] = ["pacific-appxG", "abgcoqa-appxG", "ambigsql-appxG-a", "ambigsql-appxG-b", "toy"];

/// DPO settings of a named profile.
pub fn profile(name: &str) -> Result<DpoConfig, CliError> {
    let published = |beta| DpoConfig {
        beta,
        learning_rate: 5e-7,
        batch_size: 4,
        optimizer: OptimizerKind::AdamW,
        weight_decay: 0.0,
    };
    Ok(match name {
        "pacific-appxG" | "abgcoqa-appxG" | "ambigsql-appxG-a" => published(0.01),
        "ambigsql-appxG-b" => published(0.5),
        // plain SGD keeps every penalized response's logprob moving down
        "toy" => DpoConfig {
            beta: 0.5,
            learning_rate: 1.0,
            batch_size: 4,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
        },
        other => {
            return Err(CliError::Config(format!(
                "profile: unknown profile {other:?}; known: {PROFILES:?}"
            )))
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CandidateSpaceKind {
    #[default]
    Synthetic,
    /// Responses pooled per grounding text from the training data.
    Corpus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Content heuristic id, also the evaluation content metric.
    pub heuristic: String,
    /// Policy prompt template; defaults per task kind.
    #[serde(default)]
    pub template: Option<String>,
    #[serde(default)]
    pub candidate_space: CandidateSpaceKind,
}

impl TaskSection {
    pub fn template(&self) -> &str {
        self.template.as_deref().unwrap_or(match self.kind {
            TaskKind::TabularQa => PACIFIC,
            TaskKind::ReadingComprehension => ABGCOQA,
            TaskKind::TextToSql => AMBIGSQL,
            TaskKind::Synthetic => STANDARD,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Directory of `<database_id>.sqlite` files.
    #[serde(default)]
    pub databases: Option<PathBuf>,
    /// Single-turn text-to-SQL examples (JSONL) for synthesis.
    #[serde(default)]
    pub sql_examples: Option<PathBuf>,
}

/// Field-by-field overrides of the profile's DPO settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoSection {
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActSection {
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    pub num_batches: usize,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_cap")]
    pub max_clarify_rounds: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
}

fn default_mode() -> TrainMode {
    TrainMode::FullAct
}
fn default_cap() -> usize {
    5
}
fn default_epochs() -> usize {
    MAX_EPOCHS
}

impl Default for ActSection {
    fn default() -> Self {
        ActSection {
            mode: default_mode(),
            num_batches: 100,
            epsilon: None,
            max_clarify_rounds: default_cap(),
            max_epochs: default_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Defaults to true for reading-comprehension tasks.
    #[serde(default)]
    pub iterate_goal_set: Option<bool>,
    #[serde(default = "default_cap")]
    pub clarify_cap: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            iterate_goal_set: None,
            clarify_cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SimulatorKind {
    Scripted,
    Prompted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatorSection {
    pub kind: SimulatorKind,
    /// Scripted simulator file.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub backend: Option<ModelBackendConfig>,
    #[serde(default = "default_grounding")]
    pub grounding: Grounding,
}

fn default_grounding() -> Grounding {
    Grounding::Summarize
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySection {
    pub endpoint: String,
    #[serde(default)]
    pub auth_env_var: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsSection {
    /// Conditional generator M; also the perturbation model for synthesis.
    #[serde(default)]
    pub generator: Option<ModelBackendConfig>,
    /// Action classifier A; the rule classifier when unset.
    #[serde(default)]
    pub classifier: Option<ModelBackendConfig>,
    /// User simulator U.
    #[serde(default)]
    pub simulator: Option<SimulatorSection>,
    /// Answer-only text-to-SQL model for gap analysis.
    #[serde(default)]
    pub sql_answer: Option<ModelBackendConfig>,
    /// Embedding service for the similarity heuristic; Jaccard when unset.
    #[serde(default)]
    pub similarity: Option<SimilaritySection>,
    /// Decoding for M, A and U. Defaults are not published values.
    #[serde(default)]
    pub decoding: DecodingSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    #[serde(flatten)]
    pub synth: SynthConfig,
    /// Fractions of synthesized conversations held out for validation and test.
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
}

fn default_fraction() -> f64 {
    0.2
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            synth: SynthConfig::default(),
            validation_fraction: default_fraction(),
            test_fraction: default_fraction(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub seed: u64,
    pub task: TaskSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub dpo: DpoSection,
    #[serde(default)]
    pub act: ActSection,
    #[serde(default)]
    pub policy: PolicyDecoding,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub models: ModelsSection,
    #[serde(default)]
    pub synth: SynthSection,
}

fn default_profile() -> String {
    "pacific-appxG".into()
}

/// Content digest of a file, or of a directory's file names and contents.
/// Unreadable paths fall back to the path text.
fn content_digest(path: &Path) -> String {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        entries.sort();
        let listing: Vec<String> = entries
            .iter()
            .map(|e| format!("{}:{}", e.file_name().unwrap_or_default().to_string_lossy(), content_digest(e)))
            .collect();
        return digest_bytes(listing.join("\n").as_bytes());
    }
    match std::fs::read(path) {
        Ok(bytes) => digest_bytes(&bytes),
        Err(_) => path.display().to_string(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, resolves paths against the file's directory, and validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::fs::canonicalize(base).unwrap_or_else(|_| base.to_path_buf());
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn for_each_path(&mut self, mut f: impl FnMut(&mut PathBuf)) {
        let d = &mut self.data;
        let m = &mut self.models;
        let mut paths = vec![&mut d.train, &mut d.validation, &mut d.test, &mut d.databases, &mut d.sql_examples];
        for b in [&mut m.generator, &mut m.classifier, &mut m.sql_answer].into_iter().flatten() {
            paths.push(&mut b.script_table);
        }
        if let Some(s) = &mut m.simulator {
            paths.push(&mut s.script);
            if let Some(b) = &mut s.backend {
                paths.push(&mut b.script_table);
            }
        }
        for p in paths.into_iter().flatten() {
            f(p);
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.for_each_path(|p| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        });
    }

    pub fn dpo(&self) -> Result<DpoConfig, CliError> {
        let mut c = profile(&self.profile)?;
        let o = &self.dpo;
        c.beta = o.beta.unwrap_or(c.beta);
        c.learning_rate = o.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = o.batch_size.unwrap_or(c.batch_size);
        c.optimizer = o.optimizer.unwrap_or(c.optimizer);
        c.weight_decay = o.weight_decay.unwrap_or(c.weight_decay);
        Ok(c)
    }

    pub fn act(&self) -> ActConfig {
        let mut c = ActConfig::new(self.act.num_batches, &self.task.heuristic, self.act.mode, self.seed);
        c.epsilon = self.act.epsilon;
        c.max_clarify_rounds = self.act.max_clarify_rounds;
        c.max_epochs = self.act.max_epochs;
        c
    }

    pub fn protocol(&self) -> EvalProtocol {
        let mut p = EvalProtocol::new(self.task.kind, &self.task.heuristic);
        if let Some(g) = self.eval.iterate_goal_set {
            p.iterate_goal_set = g;
        }
        p.clarify_cap = self.eval.clarify_cap;
        p
    }

    /// Field-level validation of everything the config references.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: act_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        match self.dpo() {
            Ok(d) => check("dpo", d.validate()),
            Err(e) => problems.push(e.to_string()),
        }
        let mut check = |field: &str, r: act_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        check("act", self.act().validate());
        check("eval", self.protocol().validate());
        check("policy", self.policy.validate());
        if !registered_ids().contains(&self.task.heuristic.as_str()) {
            problems.push(format!(
                "task.heuristic: unknown heuristic {:?}; registered: {:?}",
                self.task.heuristic,
                registered_ids()
            ));
        }
        let m = &self.models;
        for (field, b) in [
            ("models.generator", &m.generator),
            ("models.classifier", &m.classifier),
            ("models.sql_answer", &m.sql_answer),
        ] {
            if let Some(b) = b {
                if let Err(e) = b.validate() {
                    problems.push(format!("{field}: {e}"));
                }
            }
        }
        if let Some(s) = &m.simulator {
            match s.kind {
                SimulatorKind::Scripted if s.script.is_none() => {
                    problems.push("models.simulator.script: required for a SCRIPTED simulator".into())
                }
                SimulatorKind::Prompted if s.backend.is_none() => {
                    problems.push("models.simulator.backend: required for a PROMPTED simulator".into())
                }
                _ => {}
            }
            if let Some(Err(e)) = s.backend.as_ref().map(ModelBackendConfig::validate) {
                problems.push(format!("models.simulator.backend: {e}"));
            }
        }
        let s = &self.synth;
        for (field, f) in [("synth.validation_fraction", s.validation_fraction), ("synth.test_fraction", s.test_fraction)] {
            if !(0.0..1.0).contains(&f) {
                problems.push(format!("{field}: must be in [0, 1)"));
            }
        }
        if s.validation_fraction + s.test_fraction >= 1.0 {
            problems.push("synth: validation and test fractions must leave training data".into());
        }
        for (field, p) in self.referenced_paths() {
            if !p.exists() {
                problems.push(format!("{field}: {} does not exist", p.display()));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("\n")))
        }
    }

    pub fn referenced_paths(&self) -> Vec<(&'static str, &Path)> {
        let d = &self.data;
        let m = &self.models;
        let mut out: Vec<(&'static str, Option<&PathBuf>)> = vec![
            ("data.train", d.train.as_ref()),
            ("data.validation", d.validation.as_ref()),
            ("data.test", d.test.as_ref()),
            ("data.databases", d.databases.as_ref()),
            ("data.sql_examples", d.sql_examples.as_ref()),
            ("models.generator.script_table", m.generator.as_ref().and_then(|b| b.script_table.as_ref())),
            ("models.classifier.script_table", m.classifier.as_ref().and_then(|b| b.script_table.as_ref())),
            ("models.sql_answer.script_table", m.sql_answer.as_ref().and_then(|b| b.script_table.as_ref())),
        ];
        if let Some(s) = &m.simulator {
            out.push(("models.simulator.script", s.script.as_ref()));
            out.push(("models.simulator.backend.script_table", s.backend.as_ref().and_then(|b| b.script_table.as_ref())));
        }
        out.into_iter().filter_map(|(f, p)| p.map(|p| (f, p.as_path()))).collect()
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(anyhow::anyhow!("serialize config: {e}")))
    }

    /// Digest recorded in checkpoints and reports. Paths enter through the
    /// content they name, so identical inputs in another directory give the
    /// same digest.
    pub fn digest(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.for_each_path(|p| *p = PathBuf::from(content_digest(p)));
        let json = serde_json::to_vec(&c).map_err(|e| CliError::Runtime(e.into()))?;
        Ok(digest_bytes(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
profile = "toy"
[task]
kind = "SYNTHETIC"
heuristic = "drop_f1"
"#;

    #[test]
    fn profiles_resolve() {
        assert_eq!(profile("ambigsql-appxG-b").unwrap().beta, 0.5);
        assert_eq!(profile("ambigsql-appxG-a").unwrap().beta, 0.01);
        let p = profile("pacific-appxG").unwrap();
        assert_eq!((p.learning_rate, p.batch_size), (5e-7, 4));
        assert!(matches!(profile("nope"), Err(CliError::Config(_))));
        for name in PROFILES {
            profile(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn overrides_apply_field_by_field() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.dpo.beta = Some(0.1);
        let d = c.dpo().unwrap();
        assert_eq!((d.beta, d.learning_rate, d.optimizer), (0.1, 1.0, OptimizerKind::Sgd));
        c.validate().unwrap();
        assert_eq!(c.task.template(), STANDARD);
    }

    #[test]
    fn field_level_errors() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.act.max_epochs = 13;
        c.task.heuristic = "bleu".into();
        c.data.train = Some("/definitely/missing.jsonl".into());
        let CliError::Config(msg) = c.validate().unwrap_err() else { panic!() };
        assert!(msg.contains("act:"), "{msg}");
        assert!(msg.contains("task.heuristic:"), "{msg}");
        assert!(msg.contains("data.train:"), "{msg}");
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::parse(&format!("{MINIMAL}\nlearning_rate = 1")).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn digest_follows_content_not_location() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let text = format!("{MINIMAL}\n[data]\ntrain = \"train.jsonl\"\n");
        for d in [a.path(), b.path()] {
            std::fs::write(d.join("c.toml"), &text).unwrap();
            std::fs::write(d.join("train.jsonl"), "{}\n").unwrap();
        }
        let load = |d: &Path| RunConfig::load(&d.join("c.toml")).unwrap();
        assert_ne!(load(a.path()).data.train, load(b.path()).data.train);
        assert_eq!(load(a.path()).digest().unwrap(), load(b.path()).digest().unwrap());
        std::fs::write(b.path().join("train.jsonl"), "{}\n{}\n").unwrap();
        assert_ne!(load(a.path()).digest().unwrap(), load(b.path()).digest().unwrap());
    }
}
