//! Versioned JSON checkpoints: model config, named parameters, optimizer
//! state and free-form extras.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, ModelParams};
use crate::numerics::AdamState;

pub const CHECKPOINT_FORMAT: &str = "tamlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
    #[serde(default)]
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: &Model, params: ModelParams, optimizer: Option<AdamState>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            params,
            optimizer,
            extras: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoints serialize")
    }

    /// Parses and validates header, parameter layout and optimizer shapes.
    pub fn from_json(text: &str) -> Result<(Self, Model), ModelError> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let model = Model::new(ck.model.clone())?;
        model.check_params(&ck.params)?;
        if let Some(opt) = &ck.optimizer {
            let shapes: Vec<Vec<usize>> = ck.params.tensors.iter().map(|t| t.shape().to_vec()).collect();
            if opt.shapes() != shapes.as_slice() {
                return Err(ModelError::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok((ck, model))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Model), ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
