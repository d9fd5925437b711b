use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mlp::{Mlp, OutputSquash};
use crate::error::{LabError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which role a serialized network plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Denoiser,
    Velocity,
    Scheduler,
}

/// On-disk network format. Floats are written in shortest round-trip form,
/// so loading reproduces parameters bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: CheckpointKind,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub output_squash: OutputSquash,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_net(kind: CheckpointKind, net: &Mlp, meta: serde_json::Value) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind,
            layer_dims: net.dims().to_vec(),
            weights: net.weights().to_vec(),
            biases: net.biases().to_vec(),
            output_squash: net.squash(),
            meta,
        }
    }

    pub fn to_net(&self) -> Result<Mlp> {
        Mlp::from_parts(
            self.layer_dims.clone(),
            self.weights.clone(),
            self.biases.clone(),
            self.output_squash,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(LabError::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.to_net()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Checkpoint::from_json(&text).map_err(|e| LabError::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Loads and checks the kind.
    pub fn load_kind(path: &Path, kind: CheckpointKind) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != kind {
            return Err(LabError::Load {
                path: path.to_path_buf(),
                detail: format!("expected a {kind:?} checkpoint, found {:?}", ckpt.kind),
            });
        }
        Ok(ckpt)
    }
}

/// SHA-256 over layer dims and the raw bits of every parameter.
pub fn param_hash(net: &Mlp) -> String {
    let mut h = Sha256::new();
    for d in net.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    h.update([net.squash() as u8]);
    for p in net.params() {
        h.update(p.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}
