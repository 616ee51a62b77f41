//! Checkpoint files: magic, `u64` little-endian header length, JSON header,
//! then every parameter as little-endian `f32` in tensor-offset order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Architecture, EncoderConfig, TensorSpec};
use crate::error::{NetError, Result};
use crate::model::Model;
use crate::real::Real;

pub const MAGIC: &[u8; 8] = b"DANET01\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EncoderConfig,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorSpec>,
    pub n_params: usize,
    pub running_mean: Vec<Vec<f32>>,
    pub running_var: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

/// Writes through a sibling temporary file so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &Model<T>,
    epoch: usize,
    metrics: &BTreeMap<String, f64>,
) -> Result<()> {
    let m: Model<f32> = model.cast();
    let header = CheckpointHeader {
        config: m.config().clone(),
        epoch,
        metrics: metrics.clone(),
        tensors: m.arch().tensors.clone(),
        n_params: m.n_params(),
        running_mean: m.running_mean.clone(),
        running_var: m.running_var.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * m.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &m.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| NetError::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| NetError::io(&tmp, e))?;
    f.sync_all().map_err(|e| NetError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| NetError::io(path, e))
}

/// Reads a checkpoint. With `expected`, any difference from that encoder
/// configuration is a compatibility error.
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| NetError::io(path, e))?;
    let bad = |reason: String| NetError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(bad(format!("header of {hlen} bytes exceeds file size")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if let Some(cfg) = expected {
        if cfg != &header.config {
            return Err(NetError::Compatibility(format!(
                "checkpoint encoder {:?} does not match configured {:?}",
                header.config, cfg
            )));
        }
    }
    let arch = Architecture::new(&header.config)?;
    if arch.tensors != header.tensors || arch.n_params != header.n_params {
        return Err(NetError::Compatibility(
            "checkpoint tensor layout differs from its encoder config".into(),
        ));
    }
    let blob = &body[hlen..];
    if blob.len() != 4 * header.n_params {
        return Err(bad(format!(
            "parameter blob has {} bytes, expected {}",
            blob.len(),
            4 * header.n_params
        )));
    }
    let stats_ok = |v: &[Vec<f32>]| {
        v.len() == arch.bn_channels.len() && v.iter().zip(&arch.bn_channels).all(|(s, &c)| s.len() == c)
    };
    if !stats_ok(&header.running_mean) || !stats_ok(&header.running_var) {
        return Err(bad("running statistics do not match the batch-norm layers".into()));
    }
    let mut model = Model::<f32>::zeros(&header.config)?;
    for (p, c) in model.params.iter_mut().zip(blob.chunks_exact(4)) {
        *p = f32::from_le_bytes(c.try_into().expect("4 bytes"));
    }
    model.running_mean = header.running_mean;
    model.running_var = header.running_var;
    model.check_finite()?;
    Ok(Checkpoint {
        model,
        epoch: header.epoch,
        metrics: header.metrics,
    })
}
