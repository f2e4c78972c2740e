//! Checkpoint container: JSON document with base64 tensor blobs, the
//! architecture echo, stage lineage and RNG state.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine;
use cad_nn::Arr;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::config::{Stage, SystemConfig};
use crate::{Result, TrainError};

pub const FORMAT: &str = "cad-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngState {
    pub algo: String,
    pub seed: u64,
    /// ChaCha word position after training, as a decimal string.
    pub word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub trainable: bool,
    /// Little-endian f64 bytes, base64.
    pub data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub stage: Stage,
    pub system: SystemConfig,
    pub lineage: Vec<LineageRecord>,
    pub rng: RngState,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, TensorBlob>,
}

pub fn encode_tensor(a: &Arr, trainable: bool) -> TensorBlob {
    let mut bytes = Vec::with_capacity(a.len() * 8);
    for v in a.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        shape: a.shape().to_vec(),
        trainable,
        data: base64::engine::general_purpose::STANDARD.encode(&bytes),
    }
}

pub fn decode_tensor(blob: &TensorBlob) -> Result<Arr> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&blob.data)
        .map_err(|e| TrainError::Checkpoint(format!("bad tensor blob: {e}")))?;
    let n: usize = blob.shape.iter().product();
    if bytes.len() != 8 * n {
        return Err(TrainError::Checkpoint(format!(
            "tensor blob length {} does not match shape {:?}",
            bytes.len(),
            blob.shape
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Arr::from_shape_vec(IxDyn(&blob.shape), data)
        .map_err(|e| TrainError::Checkpoint(format!("bad tensor shape: {e}")))
}

impl Checkpoint {
    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stage == stage || self.lineage.iter().any(|l| l.stage == stage)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string(self)
            .map_err(|e| TrainError::Checkpoint(format!("serialize failed: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| TrainError::Checkpoint(format!("parse failed: {e}")))?;
        if ckpt.format != FORMAT {
            return Err(TrainError::Checkpoint(format!(
                "unsupported checkpoint format {}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn tensor(&self, name: &str) -> Option<Result<Arr>> {
        self.tensors.get(name).map(decode_tensor)
    }
}
