use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, NetworkSpec};
use crate::classifier::ClassifierKind;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// What a stored network computes, with the context needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelMeta {
    Score {
        schedule: DiffusionSchedule,
        data_var: f64,
    },
    Classifier {
        kind: ClassifierKind,
        schedule: DiffusionSchedule,
        data_var: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub steps: usize,
    pub loss_digest: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub spec: NetworkSpec,
    pub parameters: Vec<f64>,
    pub model: ModelMeta,
    pub training_meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(net: &Mlp, model: ModelMeta, training_meta: TrainingMeta) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT,
            spec: net.spec().clone(),
            parameters: net.params().to_vec(),
            model,
            training_meta,
        }
    }

    pub fn network(&self) -> Result<Mlp> {
        Mlp::from_parameters(self.spec.clone(), self.parameters.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_FORMAT})",
                ck.format_version
            )));
        }
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Loads and rejects checkpoints produced under a different config.
    pub fn load_expecting(path: &Path, config_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.training_meta.config_hash != config_hash {
            return Err(Error::HashMismatch {
                expected: config_hash.to_string(),
                found: ck.training_meta.config_hash,
            });
        }
        Ok(ck)
    }
}
