//! Model checkpoints: parameters plus the tokenizer they were trained with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::lm::{LmConfig, LmParams};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A step in a model's history that changed its tokenizer or data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub round: usize,
    pub event: String,
    pub tokenizer_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: LmConfig,
    pub round: usize,
    pub tokenizer_hash: String,
    pub lineage: Vec<LineageEvent>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(params: &LmParams, tok: &Tokenizer, round: usize, lineage: Vec<LineageEvent>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: *params.config(),
            round,
            tokenizer_hash: tok.fingerprint(),
            lineage,
            params: params.as_slice().to_vec(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model, refusing a tokenizer other than the one recorded.
    pub fn restore(&self, tok: &Tokenizer) -> Result<LmParams> {
        let hash = tok.fingerprint();
        if hash != self.tokenizer_hash {
            return Err(Error::ArtifactMismatch(format!(
                "checkpoint was trained with tokenizer {}, got {hash}",
                self.tokenizer_hash
            )));
        }
        LmParams::from_flat(self.config, self.params.clone())
    }
}
