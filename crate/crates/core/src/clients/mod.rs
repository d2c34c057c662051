//! Auxiliary model clients: the conditional generator M, the action
//! classifier A and the user simulator U, all driven by a text-in/text-out
//! [`TextGenerator`] backend.
//!
//! Two backends exist. [`ScriptedBackend`] answers from a table keyed by the
//! SHA-256 fingerprint of the prompt and is used for every deterministic test.
//! [`remote::RemoteBackend`] POSTs to a generation endpoint.

pub mod classifier;
pub mod generator;
pub mod remote;
pub mod simulator;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::conversation::fingerprint;
use crate::error::{Error, Result};

pub use classifier::{rule_action, ActionClassifier, PromptedClassifier, RuleClassifier};
pub use generator::ConditionalGenerator;
pub use remote::RemoteBackend;
pub use simulator::{Grounding, PromptedSimulator, ScriptedSimulator, UserSimulator};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_units: usize,
    pub temperature: f64,
    #[serde(default)]
    pub stop_markers: Vec<String>,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, settings: &DecodingSettings) -> Result<Self> {
        let req = GenerationRequest {
            prompt: prompt.into(),
            max_new_units: settings.max_new_units,
            temperature: settings.temperature,
            stop_markers: settings.stop_markers.clone(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_new_units == 0 {
            return Err(Error::Config("max_new_units must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "temperature must be a finite non-negative number, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Decoding knobs shared by the auxiliary model wrappers. The defaults are
/// not taken from any published setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSettings {
    #[serde(default = "default_max_new_units")]
    pub max_new_units: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_stop_markers")]
    pub stop_markers: Vec<String>,
}

fn default_max_new_units() -> usize {
    256
}

fn default_stop_markers() -> Vec<String> {
    vec!["\nUser:".into(), "\nAssistant:".into()]
}

impl Default for DecodingSettings {
    fn default() -> Self {
        DecodingSettings {
            max_new_units: default_max_new_units(),
            temperature: 0.0,
            stop_markers: default_stop_markers(),
        }
    }
}

/// Cuts `text` at the earliest stop marker.
pub fn truncate_at_stop(text: &str, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].to_string()
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
}

/// Prompt fingerprint to response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScriptTable(pub BTreeMap<String, String>);

impl ScriptTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `response` for the exact text `key` (fingerprinted here).
    pub fn insert(&mut self, key: &str, response: impl Into<String>) {
        self.0.insert(fingerprint(key), response.into());
    }

    pub fn lookup(&self, key: &str) -> Option<&str> {
        self.0.get(&fingerprint(key)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn extend(&mut self, other: ScriptTable) {
        self.0.extend(other.0);
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read script table {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
            .map_err(|e| Error::io(format!("write script table {}", path.display()), e))
    }
}

/// Table lookup on the prompt; a miss is reported as a backend failure.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    table: ScriptTable,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        ScriptedBackend { table }
    }
}

impl TextGenerator for ScriptedBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        request.validate()?;
        match self.table.lookup(&request.prompt) {
            Some(r) => Ok(truncate_at_stop(r, &request.stop_markers)),
            None => Err(Error::TransientBackend(format!(
                "scripted backend has no entry for prompt fingerprint {}",
                fingerprint(&request.prompt)
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackendKind {
    RemoteApi,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBackendConfig {
    pub backend_kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    /// JSON file mapping prompt fingerprints to responses.
    #[serde(default)]
    pub script_table: Option<PathBuf>,
}

fn default_retry_limit() -> u32 {
    2
}

fn default_timeout_secs() -> f64 {
    60.0
}

impl ModelBackendConfig {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        ModelBackendConfig {
            backend_kind: BackendKind::Scripted,
            endpoint: None,
            auth_env_var: None,
            retry_limit: default_retry_limit(),
            timeout_secs: default_timeout_secs(),
            script_table: Some(path.into()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.backend_kind {
            BackendKind::RemoteApi if self.endpoint.is_none() => {
                Err(Error::Config("REMOTE_API backend requires an endpoint".into()))
            }
            BackendKind::Scripted if self.script_table.is_none() => {
                Err(Error::Config("SCRIPTED backend requires a script_table".into()))
            }
            _ if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 => {
                Err(Error::Config("timeout_secs must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Paths are resolved against `base` when relative.
    pub fn build(&self, base: &Path) -> Result<Arc<dyn TextGenerator>> {
        self.validate()?;
        match self.backend_kind {
            BackendKind::Scripted => {
                let path = base.join(self.script_table.as_ref().expect("validated"));
                Ok(Arc::new(ScriptedBackend::new(ScriptTable::load(&path)?)))
            }
            BackendKind::RemoteApi => Ok(Arc::new(RemoteBackend::from_config(self)?)),
        }
    }
}
