//! Versioned parameter archives.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Digest of the run configuration that produced the parameters.
    pub config_digest: String,
    pub candidate_space: String,
    pub parameters: Vec<f64>,
}

impl Checkpoint {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(config_digest: impl Into<String>, candidate_space: impl Into<String>, parameters: Vec<f64>) -> Self {
        Checkpoint {
            format_version: Self::FORMAT_VERSION,
            config_digest: config_digest.into(),
            candidate_space: candidate_space.into(),
            parameters,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if self.parameters.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "parameters are not all finite".into(),
            });
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    /// Loads and checks the format version and the config digest.
    pub fn load(path: &Path, expected_config_digest: &str) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| fail(format!("malformed: {e}")))?;
        if ck.format_version != Self::FORMAT_VERSION {
            return Err(fail(format!("unsupported format version {}", ck.format_version)));
        }
        if ck.config_digest != expected_config_digest {
            return Err(fail(format!(
                "config digest {} does not match expected {expected_config_digest}",
                ck.config_digest
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_digest_check() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("ck.json");
        let ck = Checkpoint::new("abc", "synthetic", vec![0.1, -2.5, 1e-300]);
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p, "abc").unwrap(), ck);
        assert!(matches!(Checkpoint::load(&p, "xyz"), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn non_finite_rejected_on_save() {
        let d = tempfile::tempdir().unwrap();
        let ck = Checkpoint::new("abc", "s", vec![f64::NEG_INFINITY]);
        assert!(ck.save(&d.path().join("x.json")).is_err());
    }

    #[test]
    fn missing_file_is_checkpoint_error() {
        let d = tempfile::tempdir().unwrap();
        let e = Checkpoint::load(&d.path().join("none.json"), "a").unwrap_err();
        assert!(e.is_configuration());
    }
}
