//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes   "SNETCKPT"
//! version  u32 LE
//! meta_len u64 LE
//! meta     meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! payload  little-endian f64:
//!          for each layer: weights (row-major, out x in), then biases
//!          input scale (d values), input offset (d values)
//!          if meta.optimizer is present: Adam m, then Adam v (one per parameter)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Mlp;
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"SNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layer_sizes: Vec<usize>,
    pub epoch: usize,
    pub seed: u64,
    pub system: String,
    /// Free-form description of the run (domain, weights, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Mlp,
    pub optimizer: Option<AdamState>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode(
    model: &Mlp,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState>,
) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.layer_sizes = model.sizes().to_vec();
    meta.optimizer = optimizer.map(|o| OptimizerMeta {
        step: o.step,
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
    });
    let json = serde_json::to_vec(&meta)?;
    let (scale, offset) = model.input_affine();
    let mut out =
        Vec::with_capacity(20 + json.len() + 8 * (model.num_params() * 3 + 2 * scale.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| {
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
    };
    put(model.params());
    put(scale);
    put(offset);
    if let Some(o) = optimizer {
        put(&o.m);
        put(&o.v);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(
            path,
            format!("format version {version}, expected {VERSION}"),
        ));
    }
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if meta_len > body.len() {
        return Err(corrupt(path, "truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[..meta_len])
        .map_err(|e| corrupt(path, format!("metadata: {e}")))?;
    let payload = &body[meta_len..];
    if payload.len() % 8 != 0 {
        return Err(corrupt(path, "payload is not a whole number of doubles"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let shape = Mlp::zeros(&meta.layer_sizes).map_err(|e| corrupt(path, e.to_string()))?;
    let np = shape.num_params();
    let d = meta.layer_sizes[0];
    let expected = np + 2 * d + if meta.optimizer.is_some() { 2 * np } else { 0 };
    if values.len() != expected {
        return Err(corrupt(
            path,
            format!(
                "payload holds {} values, layer sizes need {expected}",
                values.len()
            ),
        ));
    }
    let mut model = Mlp::from_params(&meta.layer_sizes, values[..np].to_vec())
        .map_err(|e| corrupt(path, e.to_string()))?;
    model.set_input_affine(
        values[np..np + d].to_vec(),
        values[np + d..np + 2 * d].to_vec(),
    )?;
    let optimizer = meta.optimizer.as_ref().map(|o| {
        let base = np + 2 * d;
        AdamState {
            step: o.step,
            m: values[base..base + np].to_vec(),
            v: values[base + np..base + 2 * np].to_vec(),
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    });
    Ok(Checkpoint {
        meta,
        model,
        optimizer,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Mlp,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let bytes = encode(model, meta, optimizer)?;
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint; with `expected_sizes` the layer layout must match.
pub fn load_checkpoint(path: &Path, expected_sizes: Option<&[usize]>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let ck = decode(&bytes, path)?;
    if let Some(sizes) = expected_sizes {
        if ck.meta.layer_sizes != sizes {
            return Err(Error::Shape(format!(
                "checkpoint has layer sizes {:?}, expected {sizes:?}",
                ck.meta.layer_sizes
            )));
        }
    }
    Ok(ck)
}
