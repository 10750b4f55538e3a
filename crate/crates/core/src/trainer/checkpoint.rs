//! Checkpoint files: an 8-byte magic, a little-endian `u32` format version,
//! then a bincode body holding parameters, optimizer moments, RNG state and
//! the identity of the run that produced them.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::labels::LabelTable;
use crate::model::ModelSpec;
use crate::nn::{Adam, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OPRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub label_table: LabelTable,
    pub config_hash: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let body = bincode::serialize(self).map_err(|e| Error::Corrupt(e.to_string()))?;
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| Error::Corrupt(format!("checkpoint body: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Refuses to pair this checkpoint with an incompatible configuration.
    pub fn check_compatible(&self, config: &RunConfig) -> Result<()> {
        let want = config.model_spec();
        if want.strategy != self.model.strategy {
            return Err(Error::ConfigMismatch(format!(
                "strategy: checkpoint {:?}, config {:?}",
                self.model.strategy, want.strategy
            )));
        }
        if want.backbone != self.model.backbone {
            return Err(Error::ConfigMismatch(format!(
                "backbone: checkpoint {:?}, config {:?}",
                self.model.backbone, want.backbone
            )));
        }
        if config.variant != self.config.variant {
            return Err(Error::ConfigMismatch(format!(
                "variant: checkpoint {}, config {}",
                self.config.variant.name(),
                config.variant.name()
            )));
        }
        let hash = config.fingerprint();
        if hash != self.config_hash {
            return Err(Error::ConfigMismatch(format!(
                "config hash: checkpoint {}, config {hash}",
                self.config_hash
            )));
        }
        Ok(())
    }
}
