use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::diffcore::{Param, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::variants::Family;

pub const CHECKPOINT_FORMAT: &str = "tpamtl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointParam {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

/// Self-describing JSON container for a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub family: Family,
    pub seed: u64,
    pub config: ModelConfig,
    pub params: Vec<CheckpointParam>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &dyn Model, seed: u64) -> Self {
        let params = model
            .store()
            .iter()
            .map(|(_, p)| CheckpointParam {
                name: p.name.clone(),
                shape: p.value.shape(),
                values: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            family: model.family(),
            seed,
            config: model.config().clone(),
            params,
            extra: model.extra_state(),
        }
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = Tensor::new(p.shape[0], p.shape[1], p.values.clone())
                    .map_err(|_| Error::Checkpoint(format!("parameter {} does not match its shape", p.name)))?;
                Ok(Param {
                    name: p.name.clone(),
                    value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParamStore::from_params(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag {:?}", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
