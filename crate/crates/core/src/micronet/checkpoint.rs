use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Versioned JSON envelope around a serialisable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub kind: String,
    pub seed: u64,
    pub optimizer: Option<OptimizerConfig>,
    pub model: M,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn new(
        kind: impl Into<String>,
        seed: u64,
        optimizer: Option<OptimizerConfig>,
        model: M,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: kind.into(),
            seed,
            optimizer,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serialising checkpoint: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
