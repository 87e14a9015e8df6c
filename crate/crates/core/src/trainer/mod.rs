//! Optimization loop: AdamW with decoupled weight decay, linear-warmup +
//! cosine-decay learning rate, phase rules (pretrain freezes the element
//! embeddings, finetune may reset the scalar head), deterministic epoch
//! shuffling, gradient accumulation, metrics logging, and checkpointing.
//!
//! Determinism is the binding contract: `(seed, config, dataset)` fully
//! determine every parameter value and every logged loss. All randomness is
//! drawn from streams keyed by `(seed, purpose, step or epoch, sample)`, so
//! an interrupted run resumed from a checkpoint continues bitwise identically
//! to an uninterrupted one.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta, LoadedCheckpoint,
    CHECKPOINT_VERSION,
};

use crate::backbone::Model;
use crate::geometry::AtomicStructure;
use crate::objectives::{
    effective_target, objective_loss, FinetuneState, LossCtx, LossEma, ObjectiveConfig,
    ObjectiveError, ObjectiveKind, Standardization,
};
use crate::rng;
use crate::tensor::backward;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Micro-batches averaged per optimizer step (stand-in for multi-device
    /// effective batch sizes).
    pub grad_accum: usize,
    pub seed: u64,
    pub phase: Phase,
    /// Drop-path rate is interpolated linearly from `init` at step 0 to
    /// `final` at the last step.
    pub drop_path_init: f64,
    pub drop_path_final: f64,
    /// Steps between checkpoints; 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// Steps between metrics records.
    pub log_interval: u64,
    /// Finetune only: re-initialize the scalar head before training.
    pub reset_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            warmup_steps: 10_000,
            base_lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            adam_eps: 1e-8,
            batch_size: 8,
            grad_accum: 1,
            seed: 0,
            phase: Phase::Pretrain,
            drop_path_init: 0.1,
            drop_path_final: 0.1,
            checkpoint_interval: 1000,
            log_interval: 1,
            reset_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::BadConfig(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::BadConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(TrainError::BadConfig(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(TrainError::BadConfig("batch_size and grad_accum must be at least 1".into()));
        }
        if self.log_interval == 0 {
            return Err(TrainError::BadConfig("log_interval must be at least 1".into()));
        }
        for (name, v) in [("drop_path_init", self.drop_path_init), ("drop_path_final", self.drop_path_final)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::BadConfig(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(TrainError::BadSchedule { warmup: self.warmup_steps, total: self.total_steps });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("cosine schedule needs total_steps > warmup_steps (warmup {warmup}, total {total})")]
    BadSchedule { warmup: u64, total: u64 },
    #[error("schedule step {step} outside [0, {total}]")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("gradient for '{name}' has {found} values, parameter has {expected}")]
    GradShape { name: String, found: usize, expected: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Linear warmup to `base_lr` over `warmup` steps, then cosine decay to zero
/// at `total`. Exact at the landmarks: 0 at step 0, `base_lr` at the end of
/// warmup, `base_lr/2` at the cosine midpoint, 0 at `total`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, base_lr: f64) -> Result<f64, TrainError> {
    if total <= warmup {
        return Err(TrainError::BadSchedule { warmup, total });
    }
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    let f = (step - warmup) as f64 / (total - warmup) as f64;
    // 0.5 + 0.5·cos keeps the midpoint exactly 1/2 (the residual of
    // cos(pi/2) is below half an ulp of 0.5).
    Ok(base_lr * (0.5 + 0.5 * (std::f64::consts::PI * f).cos()))
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// First/second moment accumulators, aligned with the model's parameter
/// registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `p <- p - lr·(m_hat/(sqrt(v_hat) + eps) + weight_decay·p)`.
/// `None` gradients are treated as zero (the moments still decay and weight
/// decay still applies); frozen parameters are untouched entirely.
pub fn adamw_step(
    model: &mut Model,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), model.num_params(), "gradient list does not cover the registry");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..model.num_params() {
        if model.param(i).frozen {
            continue;
        }
        let expected = model.param(i).data.len();
        if let Some(g) = &grads[i] {
            if g.len() != expected {
                return Err(TrainError::GradShape {
                    name: model.param(i).name.clone(),
                    found: g.len(),
                    expected,
                });
            }
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        // Split borrows: data is fetched after the moments update.
        for j in 0..expected {
            let g = grads[i].as_ref().map_or(0.0, |g| g[j]);
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * (g * g);
        }
        let (m, v) = (&state.m[i], &state.v[i]);
        let data = model.param_data_mut(i);
        for j in 0..expected {
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[j]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Mutable state threaded across steps; reconstructed exactly on resume.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub opt: OptimizerState,
    pub start_step: u64,
    pub ema: LossEma,
    pub standardization: Option<Standardization>,
}

/// Where the loop writes its artifacts. Both sinks are optional so tests can
/// train silently.
pub struct TrainSinks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

impl TrainSinks<'_> {
    pub fn none() -> TrainSinks<'static> {
        TrainSinks { metrics: None, checkpoint_dir: None }
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub state: TrainState,
}

/// Deterministic shuffled order of dataset indices for one epoch.
fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut stream = rng::stream(seed, &[rng::tag::SHUFFLE, epoch]);
    order.shuffle(&mut stream);
    order
}

/// Drop-path rate at `step`, linear from init (step 0) to final (last step).
fn drop_path_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.total_steps <= 1 {
        return cfg.drop_path_init;
    }
    let f = step as f64 / (cfg.total_steps - 1) as f64;
    cfg.drop_path_init + (cfg.drop_path_final - cfg.drop_path_init) * f
}

/// Run `total_steps` optimizer steps (continuing from `resume` if given).
/// Applies phase rules, writes one metrics record every `log_interval`
/// steps, checkpoints at the configured interval, and always writes
/// `final.ckpt` when a checkpoint directory is provided.
pub fn train(
    model: &mut Model,
    dataset: &[AtomicStructure],
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    resume: Option<TrainState>,
    sinks: &mut TrainSinks,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    objective.validate(model.cfg.condition_enabled)?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    // Phase rules.
    let fresh = resume.is_none();
    match cfg.phase {
        Phase::Pretrain => model.set_frozen("embed.", true),
        Phase::Finetune => {
            model.set_frozen("embed.", false);
            if fresh && cfg.reset_head {
                model.reset_scalar_head(cfg.seed);
            }
        }
    }

    let mut state = match resume {
        Some(s) => s,
        None => {
            let standardization = if objective.kind == ObjectiveKind::Finetune {
                let targets: Result<Vec<f64>, ObjectiveError> =
                    dataset.iter().map(|s| effective_target(s, objective)).collect();
                Some(Standardization::fit(&targets?)?)
            } else {
                None
            };
            TrainState {
                opt: OptimizerState::new(model),
                start_step: 0,
                ema: LossEma::default(),
                standardization,
            }
        }
    };

    let micro_per_epoch = dataset.len().div_ceil(cfg.batch_size) as u64;
    let mut cached_epoch = u64::MAX;
    let mut order: Vec<usize> = Vec::new();
    let mut final_loss = None;

    for step in state.start_step..cfg.total_steps {
        let t0 = Instant::now();
        let lr = lr_schedule(step, cfg.warmup_steps, cfg.total_steps, cfg.base_lr)?;
        let ctx = LossCtx {
            seed: cfg.seed,
            step,
            training: true,
            drop_path_rate: drop_path_at(cfg, step),
        };

        let mut acc: Vec<Option<Vec<f64>>> = vec![None; model.num_params()];
        let mut loss_sum = 0.0;
        let mut components: BTreeMap<&'static str, f64> = BTreeMap::new();
        for micro in 0..cfg.grad_accum as u64 {
            let k = step * cfg.grad_accum as u64 + micro;
            let epoch = k / micro_per_epoch;
            if epoch != cached_epoch {
                order = epoch_order(cfg.seed, epoch, dataset.len());
                cached_epoch = epoch;
            }
            let pos = (k % micro_per_epoch) as usize;
            let lo = pos * cfg.batch_size;
            let hi = (lo + cfg.batch_size).min(dataset.len());
            let samples: Vec<(u64, &AtomicStructure)> =
                order[lo..hi].iter().map(|&i| (i as u64, &dataset[i])).collect();

            let graph = crate::tensor::Graph::new();
            let staged = model.stage(&graph);
            let ft = match state.standardization.as_ref() {
                Some(stats) => Some(FinetuneState { stats, ema: &mut state.ema }),
                None => None,
            };
            let computed = objective_loss(&staged, &samples, objective, &ctx, ft)?;
            loss_sum += computed.loss.scalar_value();
            for (k, v) in &computed.components {
                *components.entry(k).or_insert(0.0) += v;
            }
            let grads = backward(&computed.loss, false);
            for (slot, g) in acc.iter_mut().zip(staged.param_grads(&grads)) {
                match (slot.as_mut(), g) {
                    (Some(a), Some(b)) => {
                        for (x, y) in a.iter_mut().zip(&b) {
                            *x += y;
                        }
                    }
                    (None, Some(b)) => *slot = Some(b),
                    _ => {}
                }
            }
        }
        if cfg.grad_accum > 1 {
            let inv = 1.0 / cfg.grad_accum as f64;
            for slot in acc.iter_mut().flatten() {
                for v in slot.iter_mut() {
                    *v *= inv;
                }
            }
            loss_sum *= inv;
            for v in components.values_mut() {
                *v *= inv;
            }
        }

        adamw_step(
            model,
            &acc,
            &mut state.opt,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
        )?;
        final_loss = Some(loss_sum);

        if (step + 1) % cfg.log_interval == 0 {
            if let Some(w) = sinks.metrics.as_deref_mut() {
                let record = MetricsRecord {
                    step,
                    phase: cfg.phase.name(),
                    lr,
                    loss: loss_sum,
                    components: &components,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                };
                serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::other)?;
                writeln!(w)?;
            }
        }
        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            if let Some(dir) = sinks.checkpoint_dir {
                let path = dir.join(format!("checkpoint_{:07}.ckpt", step + 1));
                save_at(&path, model, cfg, objective, &state, step + 1)?;
            }
        }
    }

    let final_checkpoint = match sinks.checkpoint_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            save_at(&path, model, cfg, objective, &state, cfg.total_steps)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainSummary {
        steps_run: cfg.total_steps.saturating_sub(state.start_step),
        final_loss,
        final_checkpoint,
        state: TrainState { start_step: cfg.total_steps, ..state },
    })
}

fn save_at(
    path: &Path,
    model: &Model,
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    state: &TrainState,
    step: u64,
) -> Result<(), TrainError> {
    let meta = CheckpointMeta {
        phase: cfg.phase,
        step,
        seed: cfg.seed,
        train: cfg.clone(),
        objective: objective.clone(),
        standardization: state.standardization,
        loss_ema: state.ema,
    };
    save_checkpoint(path, model, &state.opt, &meta)?;
    Ok(())
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    step: u64,
    phase: &'static str,
    lr: f64,
    loss: f64,
    components: &'a BTreeMap<&'static str, f64>,
    wall_ms: f64,
}
