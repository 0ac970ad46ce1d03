//! Parameter checkpoints.
//!
//! JSON document:
//!
//! ```text
//! { "format": "streamtse-params", "version": 1, "meta": <any>,
//!   "params": { "seed": u64, "tensors": { "<name>": { "rows", "cols", "data": [f64...] } } } }
//! ```
//!
//! Tensors keep their insertion order. Floats are written in shortest
//! round-trip form, so loading restores bit-identical values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "streamtse-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(params: ParamSet, meta: serde_json::Value) -> Self {
        Self { format: CHECKPOINT_FORMAT.to_string(), version: CHECKPOINT_VERSION, meta, params }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, serde_json::to_vec(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(NnError::Checkpoint(format!("unexpected format `{}`", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    Ok(ckpt)
}
