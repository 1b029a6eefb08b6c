//! Training configuration, read from a single JSON or TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sepsis_core::mdp::{DEFAULT_GAMMA, DEFAULT_MIN_COUNT};
use sepsis_core::ope::OpeConfig;
use sepsis_core::statespace::{DEFAULT_K, DEFAULT_RESTARTS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of clustered states.
    pub k: usize,
    pub n_restarts: usize,
    pub gamma: f64,
    /// Visits above which a (state, action) pair counts as estimated.
    pub min_count: u64,
    /// Share of patients held out for evaluation.
    pub test_fraction: f64,
    pub seed: u64,
    /// Clustering features; defaults to the schema's clinical features plus age and weight.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<String>>,
    pub evaluation: EvaluationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Mass spread over non-greedy actions of the evaluated policy.
    pub epsilon: f64,
    /// Pseudo-count added to every action of the behavior policy.
    pub smoothing: f64,
    pub n_boot: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_weight: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            n_restarts: DEFAULT_RESTARTS,
            gamma: DEFAULT_GAMMA,
            min_count: DEFAULT_MIN_COUNT,
            test_fraction: 0.2,
            seed: 0,
            features: None,
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        let d = OpeConfig::default();
        Self {
            epsilon: d.epsilon,
            smoothing: d.smoothing,
            n_boot: d.n_boot,
            max_weight: d.max_weight,
        }
    }
}

impl TrainConfig {
    /// Reads a `.toml` file as TOML and anything else as JSON.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        let config: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| ConfigError::Parse {
                path: shown,
                message: e.to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
                path: shown,
                message: e.to_string(),
            })?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.n_restarts == 0 {
            return bad("n_restarts must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            ));
        }
        let e = &self.evaluation;
        if !(0.0..1.0).contains(&e.epsilon) {
            return bad(format!(
                "evaluation.epsilon must lie in [0, 1), got {}",
                e.epsilon
            ));
        }
        if !(e.smoothing >= 0.0) {
            return bad(format!(
                "evaluation.smoothing must be non-negative, got {}",
                e.smoothing
            ));
        }
        if e.n_boot == 0 {
            return bad("evaluation.n_boot must be at least 1".into());
        }
        if e.max_weight.is_some_and(|w| !(w > 0.0)) {
            return bad("evaluation.max_weight must be positive".into());
        }
        if self.features.as_ref().is_some_and(|f| f.is_empty()) {
            return bad("features must not be empty".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn ope_config(&self) -> OpeConfig {
        OpeConfig {
            gamma: self.gamma,
            epsilon: self.evaluation.epsilon,
            smoothing: self.evaluation.smoothing,
            max_weight: self.evaluation.max_weight,
            n_boot: self.evaluation.n_boot,
            seed: sepsis_core::seeding::derive_seed(self.seed, 3),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        std::fs::write(&t, "k = 6\nseed = 3\n[evaluation]\nn_boot = 50\n").unwrap();
        std::fs::write(&j, r#"{"k": 6, "seed": 3, "evaluation": {"n_boot": 50}}"#).unwrap();
        let a = TrainConfig::load(&t).unwrap();
        assert_eq!(a, TrainConfig::load(&j).unwrap());
        assert_eq!(a.k, 6);
        assert_eq!(a.gamma, DEFAULT_GAMMA);
        assert_eq!(a.hash(), TrainConfig::load(&j).unwrap().hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"kk": 6}"#).unwrap();
        assert!(matches!(
            TrainConfig::load(&p),
            Err(ConfigError::Parse { .. })
        ));
        std::fs::write(&p, r#"{"gamma": 1.5}"#).unwrap();
        assert!(matches!(
            TrainConfig::load(&p),
            Err(ConfigError::Invalid(_))
        ));
    }
}
