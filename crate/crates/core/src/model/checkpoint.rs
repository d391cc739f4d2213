use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::tensor::{Parameters, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EGCNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild and resume a model. All randomness derives
/// from `seed` plus the epoch and step counters, so these are the RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub epochs_trained: usize,
    pub adam_steps: u64,
}

impl CheckpointMeta {
    pub fn untrained(config: ModelConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            epochs_trained: 0,
            adam_steps: 0,
        }
    }
}

/// Layout, little-endian: magic, `u32` version, `u32` length plus JSON
/// metadata, `u32` block count, then per block a `u32` rank, the `u32` dims
/// and the values as `f32`, in parameter traversal order.
pub fn write_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if meta.config != params.config {
        return Err(ModelError::Checkpoint("metadata config differs from the parameters' config".into()));
    }
    let json = serde_json::to_vec(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    params.visit(&mut |t| {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    });
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = write_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn u32_at(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| ModelError::Checkpoint("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut r = bytes;
    if r.len() < 8 || &r[..8] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    r = &r[8..];
    let version = u32_at(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let len = u32_at(&mut r)? as usize;
    if r.len() < len {
        return Err(ModelError::Checkpoint("metadata overruns file".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&r[..len]).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    r = &r[len..];
    let mut params = ModelParams::new(meta.config, 0);
    let count = u32_at(&mut r)? as usize;
    if count != params.tensor_count() {
        return Err(ModelError::Checkpoint(format!(
            "{count} parameter blocks, configuration implies {}",
            params.tensor_count()
        )));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = u32_at(&mut r)? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| u32_at(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        if r.len() < n * 4 {
            return Err(ModelError::Checkpoint("parameter values overrun file".into()));
        }
        let data = r[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        r = &r[n * 4..];
        blocks.push((shape, data));
    }
    if !r.is_empty() {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    let mut err = None;
    let mut k = 0;
    let mut blocks = blocks.into_iter();
    params.visit_mut(&mut |t| {
        let (shape, data) = blocks.next().expect("count checked");
        if err.is_none() {
            if shape != t.shape() {
                err = Some(ModelError::CheckpointShape {
                    index: k,
                    expected: t.shape().to_vec(),
                    found: shape,
                });
            } else {
                *t = Tensor::new(shape, data).expect("shape checked");
            }
        }
        k += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if !params.all_finite() {
        return Err(ModelError::Checkpoint("non-finite parameter values".into()));
    }
    Ok((params, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_checkpoint(&bytes)
}
