//! Run configuration file.

use std::path::{Path, PathBuf};

use accent_core::augment::AugmentConfig;
use accent_core::frontend::FrontendConfig;
use accent_nn::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub model_id: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            model_id: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: Option<PathBuf>,
    pub engines: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
}

/// Every section is optional; missing keys take their defaults. The
/// `[augment]` section also drives training-time augmentation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub trainer: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::validation("config", e))?;
        if raw
            .get("trainer")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("augment"))
        {
            return Err(CliError::validation(
                "config",
                "augmentation belongs in the top-level [augment] section",
            ));
        }
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::validation("config", e))?;
        cfg.trainer.augment = cfg.augment.clone();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Apply the command-line seed, then validate.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.trainer.seed = s;
        }
        self.trainer.augment = self.augment.clone();
        self.model.validate()?;
        self.trainer.validate()?;
        if self.model.input_bins != self.frontend.features.n_bins {
            return Err(CliError::validation(
                "config",
                format!(
                    "model.input_bins = {} but frontend.features.n_bins = {}",
                    self.model.input_bins, self.frontend.features.n_bins
                ),
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(CliError::validation("config", "eval.batch_size must be positive"));
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.trainer.seed
    }

    /// SHA-256 of the canonical JSON form: keys sorted at every level.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        canonical_json(&value, &mut out);
        Sha256::digest(out.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn canonical_json(v: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                canonical_json(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, x) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonical_json(x, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
