//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic  b"SCDCKPT\0"
//! bytes 8..12   format version (u32)
//! bytes 12..20  manifest length in bytes (u64)
//! ...           manifest: JSON (model config, run metadata, tensor table)
//! ...           payload: raw f64 data, one block per tensor, in table order
//! ```
//!
//! The version lives in the fixed header, before the manifest, so a reader
//! can reject an incompatible file without having to parse a manifest whose
//! schema may itself have changed. Optimizer moments are stored as tensors
//! named `optim.m.<param>` and `optim.v.<param>` alongside the parameters,
//! which keeps resume exact without a second container format.

use crate::backbone::{Model, ModelConfig, ModelConfigError};
use crate::objectives::{LossEma, ObjectiveConfig, Standardization};
use crate::trainer::{OptimizerState, Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SCDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 8 + 4 + 8;

/// Run metadata carried inside the manifest; everything needed to resume
/// training or to run inference (standardization statistics in particular).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    /// Optimizer steps completed when this checkpoint was written.
    pub step: u64,
    pub seed: u64,
    pub train: TrainConfig,
    pub objective: ObjectiveConfig,
    pub standardization: Option<Standardization>,
    pub loss_ema: LossEma,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    meta: CheckpointMeta,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("checkpoint manifest is invalid: {0}")]
    BadManifest(String),
    #[error("checkpoint tensor '{name}' does not exist in the model")]
    UnknownTensor { name: String },
    #[error("checkpoint is missing tensor '{name}'")]
    MissingTensor { name: String },
    #[error("tensor '{name}' has shape {found:?} but the model expects {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint has {extra} bytes of trailing data")]
    TrailingData { extra: usize },
    #[error("checkpoint model config rejected: {0}")]
    BadModelConfig(#[from] ModelConfigError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub opt: OptimizerState,
    pub meta: CheckpointMeta,
}

impl LoadedCheckpoint {
    /// Resume state for [`crate::trainer::train`], picking up at the step
    /// this checkpoint was written.
    pub fn train_state(&self) -> crate::trainer::TrainState {
        crate::trainer::TrainState {
            opt: self.opt.clone(),
            start_step: self.meta.step,
            ema: self.meta.loss_ema,
            standardization: self.meta.standardization,
        }
    }
}

/// Serialize model parameters, optimizer moments, and run metadata. The file
/// is written to a sibling temp path first and renamed into place, so an
/// interrupted save never leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    opt: &OptimizerState,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    assert_eq!(opt.m.len(), model.num_params(), "optimizer state does not match the model");
    let mut tensors = Vec::with_capacity(model.num_params() * 3);
    for p in model.params() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.shape.clone() });
    }
    for prefix in ["optim.m.", "optim.v."] {
        for p in model.params() {
            tensors.push(TensorEntry { name: format!("{prefix}{}", p.name), shape: p.shape.clone() });
        }
    }
    let manifest = Manifest {
        model: model.cfg.clone(),
        meta: meta.clone(),
        optimizer_step: opt.step,
        tensors,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    let payload_len: usize = model.params().iter().map(|p| p.data.len() * 8 * 3).sum();
    let mut bytes = Vec::with_capacity(HEADER_LEN + manifest_json.len() + payload_len);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    for p in model.params() {
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for moments in [&opt.m, &opt.v] {
        for block in moments {
            for v in block {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_f64_block(
    bytes: &[u8],
    offset: &mut usize,
    n: usize,
    context: &'static str,
) -> Result<Vec<f64>, CheckpointError> {
    let need = n.checked_mul(8).ok_or(CheckpointError::Truncated { context })?;
    let end = offset.checked_add(need).ok_or(CheckpointError::Truncated { context })?;
    if end > bytes.len() {
        return Err(CheckpointError::Truncated { context });
    }
    let out = bytes[*offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *offset = end;
    Ok(out)
}

/// Read a checkpoint back into a freshly constructed model and optimizer
/// state. Every model parameter and both moment tensors must be present with
/// matching shapes; unknown or leftover data is an error rather than a
/// silent skip.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated { context: "header" });
    }
    if bytes[0..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if found != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found, expected: CHECKPOINT_VERSION });
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = HEADER_LEN
        .checked_add(manifest_len)
        .ok_or(CheckpointError::Truncated { context: "manifest" })?;
    if manifest_end > bytes.len() {
        return Err(CheckpointError::Truncated { context: "manifest" });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| CheckpointError::BadManifest(e.to_string()))?;

    let mut model = Model::new(manifest.model.clone(), manifest.meta.seed)?;
    let n = model.num_params();
    let mut opt = OptimizerState::new(&model);
    opt.step = manifest.optimizer_step;
    let mut seen_param = vec![false; n];
    let mut seen_m = vec![false; n];
    let mut seen_v = vec![false; n];

    let mut offset = manifest_end;
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let (target, seen, index) = if let Some(rest) = entry.name.strip_prefix("optim.m.") {
            ("m", &mut seen_m, model.param_index(rest))
        } else if let Some(rest) = entry.name.strip_prefix("optim.v.") {
            ("v", &mut seen_v, model.param_index(rest))
        } else {
            ("p", &mut seen_param, model.param_index(&entry.name))
        };
        let i = index.ok_or_else(|| CheckpointError::UnknownTensor { name: entry.name.clone() })?;
        if entry.shape != model.param(i).shape {
            return Err(CheckpointError::ShapeMismatch {
                name: entry.name.clone(),
                found: entry.shape.clone(),
                expected: model.param(i).shape.clone(),
            });
        }
        if seen[i] {
            return Err(CheckpointError::BadManifest(format!(
                "duplicate tensor '{}'",
                entry.name
            )));
        }
        seen[i] = true;
        let values = read_f64_block(&bytes, &mut offset, numel, "tensor payload")?;
        match target {
            "m" => opt.m[i] = values,
            "v" => opt.v[i] = values,
            _ => *model.param_data_mut(i) = values,
        }
    }

    for i in 0..n {
        if !seen_param[i] {
            return Err(CheckpointError::MissingTensor { name: model.param(i).name.clone() });
        }
        if !seen_m[i] {
            return Err(CheckpointError::MissingTensor {
                name: format!("optim.m.{}", model.param(i).name),
            });
        }
        if !seen_v[i] {
            return Err(CheckpointError::MissingTensor {
                name: format!("optim.v.{}", model.param(i).name),
            });
        }
    }
    if offset != bytes.len() {
        return Err(CheckpointError::TrailingData { extra: bytes.len() - offset });
    }
    Ok(LoadedCheckpoint { model, opt, meta: manifest.meta })
}
