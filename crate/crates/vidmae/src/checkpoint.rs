//! Versioned JSON checkpoints: model config echo, all parameters, both
//! optimizer states, and resume bookkeeping.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VidmaeError};
use crate::model::ModelConfig;
use crate::nn::{AdamW, ParamStore};

/// Bumped whenever the on-disk layout changes incompatibly.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub params: ParamStore,
    /// MAE optimizer state (pretrain: reconstruction path; finetune: classifier path).
    pub opt_mae: Option<AdamW>,
    /// Sampler optimizer state; absent once the sampler is frozen.
    pub opt_sampler: Option<AdamW>,
    pub epoch: usize,
    pub seed: u64,
    /// Free-form provenance, e.g. "pretrain" or "finetune fold 2".
    pub stage: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| VidmaeError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        let json = serde_json::to_string(self)
            .map_err(|e| VidmaeError::Format(format!("checkpoint serialization: {e}")))?;
        fs::write(path, json).map_err(|e| VidmaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| VidmaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        // peek at the version before committing to the full schema
        #[derive(Deserialize)]
        struct VersionOnly {
            version: u32,
        }
        let v: VersionOnly = serde_json::from_str(&text).map_err(|e| {
            VidmaeError::Format(format!("{}: not a checkpoint: {e}", path.display()))
        })?;
        if v.version != CHECKPOINT_VERSION {
            return Err(VidmaeError::Version(format!(
                "{}: checkpoint version {} (this build reads {})",
                path.display(),
                v.version,
                CHECKPOINT_VERSION
            )));
        }
        serde_json::from_str(&text)
            .map_err(|e| VidmaeError::Format(format!("{}: malformed checkpoint: {e}", path.display())))
    }
}
