//! Self-describing JSON checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use accent_core::frontend::FrontendConfig;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::model::{build_model, Classifier, ParamBlob};
use crate::trainer::{TrainConfig, TrainHistory};
use crate::NnError;

pub const CHECKPOINT_FORMAT: &str = "accent-forge-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub frontend: FrontendConfig,
    pub train: Option<TrainConfig>,
    pub history: Option<TrainHistory>,
    pub params: BTreeMap<String, ParamBlob>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Classifier,
        frontend: &FrontendConfig,
        train: Option<&TrainConfig>,
        history: Option<&TrainHistory>,
    ) -> Result<Self, NnError> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            model: model.config().clone(),
            frontend: frontend.clone(),
            train: train.cloned(),
            history: history.cloned(),
            params: model.state_dict()?,
        })
    }

    /// Rebuild the classifier. Recurrent checkpoints restore with the stub
    /// encoder.
    pub fn restore(&self) -> Result<Classifier, NnError> {
        let model = build_model(&self.model, 0)?;
        model.load_state_dict(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        fs::write(path, json).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!("unsupported format `{}`", ck.format)));
        }
        Ok(ck)
    }
}
