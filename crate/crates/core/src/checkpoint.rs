//! JSON checkpoints holding parameters, optimizer state and the trainer
//! configuration, enough to resume training bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamState;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::{Trainer, TrainerConfig};

pub const FORMAT: &str = "earlystop-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub trainer: TrainerConfig,
    pub params: ModelParams,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            epoch: trainer.epoch,
            trainer: trainer.config.clone(),
            params: trainer.params.clone(),
            adam: trainer.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::resume(self.params, self.adam, self.trainer, self.epoch)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::invalid(format!(
                "not a checkpoint (format {:?})",
                ck.format
            )));
        }
        if ck.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        ck.params.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
