//! Training objectives.
//!
//! Five losses share one reduction convention: mean over (atoms × 3) within a
//! sample, then mean over the samples of the batch, so magnitudes do not
//! depend on molecule or batch size.
//!
//! * `coord_loss` — plain node denoising: predict ε from the corrupted
//!   geometry alone.
//! * `scd_loss` — self-conditioned denoising: pass 1 embeds the clean view
//!   into `c`, pass 2 denoises the corrupted view conditioned on `c`.
//!   Per-sample condition dropout replaces `c` with the unconditional path;
//!   gradients flow through both passes unless `detach_condition` is set.
//! * `pair_conditional_loss` — denoise one tagged component conditioned on an
//!   embedding of the other.
//! * `force_energy_loss` — supervised energies and forces, with forces either
//!   read from the equivariant head ("forward") or computed as the negative
//!   coordinate gradient of the scalar head ("backward"/conservative).
//! * `finetune_loss` — supervised scalar regression on a lightly noised
//!   input, with an auxiliary denoising term and optional loss-EMA
//!   normalization.
//!
//! Every stochastic choice is drawn from a stream keyed by
//! `(seed, purpose, step, sample id)`, so losses are pure functions of
//! `(parameters, batch, seed, step)` and two objectives that share a purpose
//! consume identical draws. That is what makes `scd_loss` with dropout 1 (or
//! with zero-initialized conditioning) agree with `coord_loss` bitwise.

use crate::backbone::{ForwardMode, ForwardOutput, Staged};
use crate::geometry::{
    corrupt, corruption_stream, extract_component, z_to_symbol, AtomicStructure, ComponentTag,
    GeometryError,
};
use crate::rng;
use crate::tensor::{backward, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Coord,
    #[default]
    Scd,
    PairConditional,
    ForceEnergy,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    #[serde(rename = "embed_a_denoise_b")]
    EmbedADenoiseB,
    #[serde(rename = "embed_b_denoise_a")]
    EmbedBDenoiseA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForceMode {
    #[default]
    Forward,
    Backward,
}

/// Objective selection plus every knob any objective reads. Kind-specific
/// fields are ignored by the other kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Corruption noise scale in Å (the denoising target).
    pub sigma_corr: f64,
    /// Regularization noise scale in Å (input perturbation only).
    pub sigma_reg: f64,
    /// Per-sample probability of replacing the condition with the
    /// unconditional path during SCD.
    pub condition_dropout_rate: f64,
    /// Ablation: stop gradients from flowing into the embedding pass.
    pub detach_condition: bool,
    // pair_conditional
    pub direction: Direction,
    // force_energy
    pub force_mode: ForceMode,
    pub energy_weight: f64,
    pub force_weight: f64,
    // finetune
    pub target_key: String,
    pub denoise_weight: f64,
    pub subtract_reference_energy: bool,
    /// Per-element reference energies (symbol -> eV), subtracted from the
    /// target before standardization when enabled.
    pub reference_energies: BTreeMap<String, f64>,
    /// Coefficient of the loss EMA that normalizes the primary term;
    /// 0 disables normalization.
    pub loss_ema: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Scd,
            sigma_corr: 0.04,
            sigma_reg: 0.005,
            condition_dropout_rate: 0.2,
            detach_condition: false,
            direction: Direction::EmbedADenoiseB,
            force_mode: ForceMode::Forward,
            energy_weight: 1.0,
            force_weight: 1.0,
            target_key: "energy".into(),
            denoise_weight: 0.1,
            subtract_reference_energy: false,
            reference_energies: BTreeMap::new(),
            loss_ema: 0.05,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self, condition_enabled: bool) -> Result<(), ObjectiveError> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.sigma_corr) || !finite_nonneg(self.sigma_reg) {
            return Err(ObjectiveError::BadConfig(format!(
                "noise scales must be finite and non-negative (sigma_corr={}, sigma_reg={})",
                self.sigma_corr, self.sigma_reg
            )));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout_rate) {
            return Err(ObjectiveError::BadConfig(format!(
                "condition_dropout_rate {} outside [0, 1]",
                self.condition_dropout_rate
            )));
        }
        if !finite_nonneg(self.energy_weight)
            || !finite_nonneg(self.force_weight)
            || !finite_nonneg(self.denoise_weight)
        {
            return Err(ObjectiveError::BadConfig("loss weights must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.loss_ema) {
            return Err(ObjectiveError::BadConfig(format!("loss_ema {} outside [0, 1)", self.loss_ema)));
        }
        match self.kind {
            ObjectiveKind::Scd | ObjectiveKind::PairConditional if !condition_enabled => {
                Err(ObjectiveError::ConditionDisabled { objective: self.kind.name() })
            }
            ObjectiveKind::Finetune if self.target_key.is_empty() => {
                Err(ObjectiveError::BadConfig("finetune target_key is empty".into()))
            }
            _ => Ok(()),
        }
    }
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveKind::Coord => "coord",
            ObjectiveKind::Scd => "scd",
            ObjectiveKind::PairConditional => "pair_conditional",
            ObjectiveKind::ForceEnergy => "force_energy",
            ObjectiveKind::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("objective '{objective}' requires a condition-enabled model")]
    ConditionDisabled { objective: &'static str },
    #[error("structure is missing the {what} label")]
    MissingLabel { what: String },
    #[error("no reference energy configured for element {symbol}")]
    MissingReference { symbol: String },
    #[error("invalid objective config: {0}")]
    BadConfig(String),
    #[error("target standardization needs variance: all {n} targets equal {value}")]
    ZeroVariance { n: usize, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// Common machinery
// ---------------------------------------------------------------------------

/// Where in training a loss evaluation sits; determines every RNG stream.
#[derive(Debug, Clone, Copy)]
pub struct LossCtx {
    pub seed: u64,
    pub step: u64,
    pub training: bool,
    pub drop_path_rate: f64,
}

impl LossCtx {
    pub fn eval(seed: u64, step: u64) -> Self {
        LossCtx { seed, step, training: false, drop_path_rate: 0.0 }
    }
}

/// The scalar loss node plus evaluated component values for logging.
#[derive(Debug)]
pub struct ComputedLoss {
    pub loss: Var,
    pub components: Vec<(&'static str, f64)>,
}

/// Mean squared error between a `(N, 3)` prediction and target rows —
/// the per-sample reduction (mean over atoms × coordinates) used everywhere.
pub fn sample_denoise_mse(pred: &Var, target: &[[f64; 3]]) -> Var {
    let n = target.len();
    assert_eq!(pred.shape(), vec![n, 3], "denoise prediction shape mismatch");
    let flat: Vec<f64> = target.iter().flatten().copied().collect();
    let t = pred.graph().constant(flat, &[n, 3]);
    pred.sub(&t).square().mean_all()
}

fn batch_mean(terms: Vec<Var>) -> Var {
    let n = terms.len();
    let mut it = terms.into_iter();
    let mut acc = it.next().expect("batch_mean on empty batch");
    for t in it {
        acc = acc.add(&t);
    }
    if n > 1 {
        acc = acc.scale(1.0 / n as f64);
    }
    acc
}

/// The denoising forward pass over a (possibly corrupted) structure, with
/// drop-path decisions drawn from the denoise stream of `(step, sample)`.
fn denoise_pass(
    staged: &Staged,
    s: &AtomicStructure,
    cond: Option<&Var>,
    ctx: &LossCtx,
    sample: u64,
) -> Result<ForwardOutput, GeometryError> {
    let mut dp = rng::stream(ctx.seed, &[rng::tag::DROP_PATH_DENOISE, ctx.step, sample]);
    let mut mode = ForwardMode {
        training: ctx.training,
        drop_path_rate: ctx.drop_path_rate,
        rng: ctx.training.then_some(&mut dp),
    };
    staged.forward(s, cond, &mut mode)
}

/// The embedding (conditioning) forward pass, on its own drop-path stream so
/// skipping it never shifts the denoising pass's draws.
fn embed_pass(
    staged: &Staged,
    s: &AtomicStructure,
    ctx: &LossCtx,
    sample: u64,
) -> Result<ForwardOutput, GeometryError> {
    let mut dp = rng::stream(ctx.seed, &[rng::tag::DROP_PATH_EMBED, ctx.step, sample]);
    let mut mode = ForwardMode {
        training: ctx.training,
        drop_path_rate: ctx.drop_path_rate,
        rng: ctx.training.then_some(&mut dp),
    };
    staged.forward(s, None, &mut mode)
}

/// Per-sample condition-dropout decision (deterministic in its arguments).
pub fn condition_dropped(seed: u64, step: u64, sample: u64, rate: f64) -> bool {
    let mut stream = rng::stream(seed, &[rng::tag::COND_DROP, step, sample]);
    let u: f64 = stream.gen_range(0.0..1.0);
    u < rate
}

/// One corruption draw bundled with its sample id; the unit both denoising
/// losses consume. `clean` carries the regularization view, `corrupted` the
/// ε-shifted positions, `noise` the ε target.
pub struct DenoiseSample {
    pub id: u64,
    pub clean: AtomicStructure,
    pub corrupted: AtomicStructure,
    pub noise: Vec<[f64; 3]>,
}

fn prepare_batch(
    samples: &[(u64, &AtomicStructure)],
    sigma_corr: f64,
    sigma_reg: f64,
    ctx: &LossCtx,
) -> Result<Vec<DenoiseSample>, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    samples
        .iter()
        .map(|&(id, s)| {
            let mut stream = corruption_stream(ctx.seed, ctx.step, id);
            let cs = corrupt(s, sigma_corr, sigma_reg, &mut stream)?;
            Ok(DenoiseSample { id, clean: cs.clean, corrupted: cs.corrupted, noise: cs.noise })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// coord
// ---------------------------------------------------------------------------

pub fn coord_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    let prepared = prepare_batch(samples, cfg.sigma_corr, cfg.sigma_reg, ctx)?;
    coord_loss_prepared(staged, &prepared, ctx)
}

pub fn coord_loss_prepared(
    staged: &Staged,
    prepared: &[DenoiseSample],
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    if prepared.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(prepared.len());
    for ds in prepared {
        let out = denoise_pass(staged, &ds.corrupted, None, ctx, ds.id)?;
        terms.push(sample_denoise_mse(&out.v_l1, &ds.noise));
    }
    let loss = batch_mean(terms);
    let v = loss.scalar_value();
    Ok(ComputedLoss { loss, components: vec![("denoise", v)] })
}

// ---------------------------------------------------------------------------
// scd
// ---------------------------------------------------------------------------

pub fn scd_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    let prepared = prepare_batch(samples, cfg.sigma_corr, cfg.sigma_reg, ctx)?;
    scd_loss_prepared(staged, &prepared, cfg, ctx)
}

pub fn scd_loss_prepared(
    staged: &Staged,
    prepared: &[DenoiseSample],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    if !staged.model.cfg.condition_enabled {
        return Err(ObjectiveError::ConditionDisabled { objective: "scd" });
    }
    if prepared.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(prepared.len());
    let mut dropped = 0usize;
    for ds in prepared {
        let cond = if condition_dropped(ctx.seed, ctx.step, ds.id, cfg.condition_dropout_rate) {
            dropped += 1;
            None
        } else {
            let emb = embed_pass(staged, &ds.clean, ctx, ds.id)?;
            Some(if cfg.detach_condition { emb.c_out.detach() } else { emb.c_out })
        };
        let out = denoise_pass(staged, &ds.corrupted, cond.as_ref(), ctx, ds.id)?;
        terms.push(sample_denoise_mse(&out.v_l1, &ds.noise));
    }
    let loss = batch_mean(terms);
    let v = loss.scalar_value();
    Ok(ComputedLoss {
        loss,
        components: vec![("denoise", v), ("cond_dropped", dropped as f64 / prepared.len() as f64)],
    })
}

// ---------------------------------------------------------------------------
// pair-conditional
// ---------------------------------------------------------------------------

pub fn pair_conditional_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    if !staged.model.cfg.condition_enabled {
        return Err(ObjectiveError::ConditionDisabled { objective: "pair_conditional" });
    }
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    cfg.validate(true)?;
    let (cond_tag, target_tag) = match cfg.direction {
        Direction::EmbedADenoiseB => (ComponentTag::A, ComponentTag::B),
        Direction::EmbedBDenoiseA => (ComponentTag::B, ComponentTag::A),
    };
    let mut terms = Vec::with_capacity(samples.len());
    for &(id, s) in samples {
        let (cond_sub, _) = extract_component(s, cond_tag)?;
        let (_, target_idx) = extract_component(s, target_tag)?;
        let mut stream = corruption_stream(ctx.seed, ctx.step, id);
        // ε first (so it is independent of sigma_reg), then the conditioning
        // view's regularization noise — mirroring `corrupt`'s draw order.
        let corr = Normal::new(0.0, cfg.sigma_corr).expect("validated sigma");
        let eps: Vec<[f64; 3]> = target_idx
            .iter()
            .map(|_| [corr.sample(&mut stream), corr.sample(&mut stream), corr.sample(&mut stream)])
            .collect();
        let mut cond_view = cond_sub;
        if cfg.sigma_reg > 0.0 {
            let reg = Normal::new(0.0, cfg.sigma_reg).expect("validated sigma");
            for p in cond_view.positions.iter_mut() {
                for v in p.iter_mut() {
                    *v += reg.sample(&mut stream);
                }
            }
        }
        let mut full = s.clone();
        for (e, &ai) in eps.iter().zip(&target_idx) {
            for k in 0..3 {
                full.positions[ai][k] += e[k];
            }
        }
        let emb = embed_pass(staged, &cond_view, ctx, id)?;
        let c = if cfg.detach_condition { emb.c_out.detach() } else { emb.c_out };
        let out = denoise_pass(staged, &full, Some(&c), ctx, id)?;
        let v_target = out.v_l1.gather_rows(&target_idx);
        terms.push(sample_denoise_mse(&v_target, &eps));
    }
    let loss = batch_mean(terms);
    let v = loss.scalar_value();
    Ok(ComputedLoss { loss, components: vec![("denoise", v)] })
}

// ---------------------------------------------------------------------------
// force-energy
// ---------------------------------------------------------------------------

/// Conservative forces: `-∂y/∂positions`. `create_graph` must be true when
/// the result feeds a loss that is differentiated again.
pub fn backward_forces(y: &Var, pos: &Var, create_graph: bool) -> Var {
    let grads = backward(y, create_graph);
    match grads.get(pos) {
        Some(g) => g.neg(),
        // y does not depend on the positions (e.g. no edges): flat surface.
        None => pos.graph().constant(vec![0.0; pos.numel()], &pos.shape()),
    }
}

pub fn force_energy_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut terms = Vec::with_capacity(samples.len());
    let (mut e_sum, mut f_sum) = (0.0, 0.0);
    for &(id, s) in samples {
        let e_label = s
            .labels
            .energy
            .ok_or_else(|| ObjectiveError::MissingLabel { what: "energy".into() })?;
        let f_label = s
            .labels
            .forces
            .as_ref()
            .ok_or_else(|| ObjectiveError::MissingLabel { what: "forces".into() })?;
        let (e_term, f_term) = match cfg.force_mode {
            ForceMode::Forward => {
                let out = denoise_pass(staged, s, None, ctx, id)?;
                (
                    out.y_l0.add_scalar(-e_label).square(),
                    sample_denoise_mse(&out.v_l1, f_label),
                )
            }
            ForceMode::Backward => {
                let (pos, ng) = staged.prepare(s)?;
                let mut dp = rng::stream(ctx.seed, &[rng::tag::DROP_PATH_DENOISE, ctx.step, id]);
                let mut mode = ForwardMode {
                    training: ctx.training,
                    drop_path_rate: ctx.drop_path_rate,
                    rng: ctx.training.then_some(&mut dp),
                };
                let out = staged.forward_prepared(s, &pos, &ng, None, &mut mode);
                let pred = backward_forces(&out.y_l0, &pos, true);
                (
                    out.y_l0.add_scalar(-e_label).square(),
                    sample_denoise_mse(&pred, f_label),
                )
            }
        };
        e_sum += e_term.scalar_value();
        f_sum += f_term.scalar_value();
        terms.push(e_term.scale(cfg.energy_weight).add(&f_term.scale(cfg.force_weight)));
    }
    let b = samples.len() as f64;
    let loss = batch_mean(terms);
    let total = loss.scalar_value();
    Ok(ComputedLoss {
        loss,
        components: vec![("total", total), ("energy", e_sum / b), ("force", f_sum / b)],
    })
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

/// Target standardization statistics fitted on the training split and stored
/// in the checkpoint manifest (population standard deviation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn identity() -> Self {
        Standardization { mean: 0.0, std: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Result<Self, ObjectiveError> {
        if values.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12) {
            return Err(ObjectiveError::ZeroVariance { n: values.len(), value: mean });
        }
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Exponential moving average of the primary finetune loss. `None` until the
/// first batch, which initializes it to that batch's value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossEma {
    pub value: Option<f64>,
}

/// The regression target after optional per-element reference subtraction,
/// before standardization.
pub fn effective_target(s: &AtomicStructure, cfg: &ObjectiveConfig) -> Result<f64, ObjectiveError> {
    let raw = s
        .labels
        .scalar(&cfg.target_key)
        .ok_or_else(|| ObjectiveError::MissingLabel { what: cfg.target_key.clone() })?;
    if !cfg.subtract_reference_energy {
        return Ok(raw);
    }
    let mut t = raw;
    for &z in &s.species {
        let symbol = z_to_symbol(z).expect("validated species");
        let r = cfg
            .reference_energies
            .get(symbol)
            .ok_or_else(|| ObjectiveError::MissingReference { symbol: symbol.into() })?;
        t -= r;
    }
    Ok(t)
}

/// Supervised finetuning step: a single forward on the σ_reg-noised input.
/// Primary term: squared error of `y_L0` against the standardized target,
/// optionally divided by `max(EMA, 1e-8)` where the EMA tracks the primary
/// term itself (updated here, after use, without gradient flow). Auxiliary
/// term: `denoise_weight ·` MSE of `v_L1` against the σ_reg noise.
pub fn finetune_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    stats: &Standardization,
    ema: &mut LossEma,
    ctx: &LossCtx,
) -> Result<ComputedLoss, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut primary_terms = Vec::with_capacity(samples.len());
    let mut aux_terms = Vec::with_capacity(samples.len());
    for &(id, s) in samples {
        let t_std = stats.apply(effective_target(s, cfg)?);
        // Single noised view: corrupt at σ_reg scale with no extra
        // regularization draw; `corrupted = original + ε_reg` exactly.
        let mut stream = corruption_stream(ctx.seed, ctx.step, id);
        let cs = corrupt(s, cfg.sigma_reg, 0.0, &mut stream)?;
        let out = denoise_pass(staged, &cs.corrupted, None, ctx, id)?;
        primary_terms.push(out.y_l0.add_scalar(-t_std).square());
        if cfg.denoise_weight > 0.0 {
            aux_terms.push(sample_denoise_mse(&out.v_l1, &cs.noise));
        }
    }
    let primary = batch_mean(primary_terms);
    let p_val = primary.scalar_value();
    let ema_prev = ema.value.unwrap_or(p_val);
    let mut components = vec![("primary", p_val)];
    let mut loss = if cfg.loss_ema > 0.0 {
        components.push(("ema", ema_prev));
        primary.scale(1.0 / ema_prev.max(1e-8))
    } else {
        primary
    };
    // Update after use; the division above saw the pre-update EMA.
    ema.value = Some(match ema.value {
        None => p_val,
        Some(prev) => (1.0 - cfg.loss_ema) * prev + cfg.loss_ema * p_val,
    });
    if !aux_terms.is_empty() {
        let aux = batch_mean(aux_terms);
        components.push(("denoise", aux.scalar_value()));
        loss = loss.add(&aux.scale(cfg.denoise_weight));
    }
    Ok(ComputedLoss { loss, components })
}

/// De-standardized scalar prediction in original label units (adds back the
/// reference-energy sum when the objective subtracts it).
pub fn predict_scalar(
    staged: &Staged,
    s: &AtomicStructure,
    cfg: &ObjectiveConfig,
    stats: &Standardization,
) -> Result<f64, ObjectiveError> {
    let out = staged.forward(s, None, &mut ForwardMode::eval())?;
    let mut y = stats.invert(out.y_l0.scalar_value());
    if cfg.subtract_reference_energy {
        for &z in &s.species {
            let symbol = z_to_symbol(z).expect("validated species");
            let r = cfg
                .reference_energies
                .get(symbol)
                .ok_or_else(|| ObjectiveError::MissingReference { symbol: symbol.into() })?;
            y += r;
        }
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// State the finetune objective threads between steps.
pub struct FinetuneState<'a> {
    pub stats: &'a Standardization,
    pub ema: &'a mut LossEma,
}

pub fn objective_loss(
    staged: &Staged,
    samples: &[(u64, &AtomicStructure)],
    cfg: &ObjectiveConfig,
    ctx: &LossCtx,
    finetune: Option<FinetuneState>,
) -> Result<ComputedLoss, ObjectiveError> {
    match cfg.kind {
        ObjectiveKind::Coord => coord_loss(staged, samples, cfg, ctx),
        ObjectiveKind::Scd => scd_loss(staged, samples, cfg, ctx),
        ObjectiveKind::PairConditional => pair_conditional_loss(staged, samples, cfg, ctx),
        ObjectiveKind::ForceEnergy => force_energy_loss(staged, samples, cfg, ctx),
        ObjectiveKind::Finetune => {
            let ft = finetune.ok_or_else(|| {
                ObjectiveError::BadConfig("finetune objective needs standardization state".into())
            })?;
            finetune_loss(staged, samples, cfg, ft.stats, ft.ema, ctx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Model, ModelConfig};
    use crate::tensor::Graph;
    use rand_chacha::rand_core::SeedableRng;

    fn small_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            embedding_dim: 16,
            num_layers: 2,
            num_heads: 2,
            cutoff: 4.0,
            num_radial_basis: 8,
            ..ModelConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    fn randomize_conditioning(model: &mut Model, seed: u64) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for i in 0..model.num_params() {
            let name = model.param(i).name.clone();
            if name.contains("cond.w2") || name.contains("cond.b2") {
                for v in model.param_data_mut(i).iter_mut() {
                    *v = r.gen_range(-0.3..0.3);
                }
            }
        }
    }

    fn molecule(n: usize, seed: u64) -> AtomicStructure {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        AtomicStructure::new(
            (0..n).map(|_| [1u8, 6, 8][r.gen_range(0..3)]).collect(),
            (0..n)
                .map(|_| [r.gen_range(0.0..3.0), r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)])
                .collect(),
        )
    }

    #[test]
    fn reduction_convention_hand_oracle() {
        // Prediction [[1,0,0],[0,1,0]] against zero noise: mean over the six
        // entries of the squared error is 2/6 = 1/3.
        let g = Graph::new();
        let pred = g.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]);
        let loss = sample_denoise_mse(&pred, &[[0.0; 3]; 2]);
        assert!((loss.scalar_value() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn coord_loss_deterministic_and_nonnegative() {
        let model = small_model(1);
        let s1 = molecule(5, 2);
        let s2 = molecule(4, 3);
        let samples = [(0u64, &s1), (1u64, &s2)];
        let cfg = ObjectiveConfig { kind: ObjectiveKind::Coord, ..Default::default() };
        let ctx = LossCtx::eval(7, 42);
        let run = || {
            let g = Graph::new();
            let staged = model.stage(&g);
            coord_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0);
    }

    #[test]
    fn coord_loss_with_zero_noise_matches_direct_forward() {
        // σ_corr = σ_reg = 0 corrupts nothing, so the loss is the mean square
        // of the model's own v_L1 on the pristine structure.
        let model = small_model(4);
        let s = molecule(6, 5);
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::Coord,
            sigma_corr: 0.0,
            sigma_reg: 0.0,
            ..Default::default()
        };
        let ctx = LossCtx::eval(9, 0);
        let g = Graph::new();
        let staged = model.stage(&g);
        let loss = coord_loss(&staged, &[(0, &s)], &cfg, &ctx).unwrap().loss.scalar_value();
        let out = staged.forward(&s, None, &mut crate::backbone::ForwardMode::eval()).unwrap();
        let direct = out.v_l1.square().mean_all().scalar_value();
        assert_eq!(loss.to_bits(), direct.to_bits());
    }

    #[test]
    fn scd_equals_coord_at_zero_init_bitwise() {
        // Conditioning MLPs are zero-initialized, so the condition has no
        // effect and the two losses coincide exactly on the same batch.
        let model = small_model(11);
        let s1 = molecule(5, 6);
        let s2 = molecule(7, 7);
        let samples = [(10u64, &s1), (11u64, &s2)];
        let cfg = ObjectiveConfig { condition_dropout_rate: 0.0, ..Default::default() };
        let ctx = LossCtx::eval(13, 5);
        let g = Graph::new();
        let staged = model.stage(&g);
        let scd = scd_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        let coord = coord_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        assert_eq!(scd.to_bits(), coord.to_bits());
    }

    #[test]
    fn scd_equals_coord_under_full_dropout_bitwise() {
        // With dropout 1 every condition is dropped; even a model whose
        // conditioning pathway is trained must reproduce coord exactly.
        let mut model = small_model(12);
        randomize_conditioning(&mut model, 8);
        let s = molecule(6, 9);
        let samples = [(3u64, &s)];
        let cfg = ObjectiveConfig { condition_dropout_rate: 1.0, ..Default::default() };
        let ctx = LossCtx::eval(17, 2);
        let g = Graph::new();
        let staged = model.stage(&g);
        let scd = scd_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        let coord = coord_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        assert_eq!(scd.to_bits(), coord.to_bits());
    }

    #[test]
    fn scd_with_trained_conditioning_differs_from_coord() {
        let mut model = small_model(13);
        randomize_conditioning(&mut model, 10);
        let s = molecule(6, 11);
        let samples = [(0u64, &s)];
        let cfg = ObjectiveConfig { condition_dropout_rate: 0.0, ..Default::default() };
        let ctx = LossCtx::eval(19, 3);
        let g = Graph::new();
        let staged = model.stage(&g);
        let scd = scd_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        let coord = coord_loss(&staged, &samples, &cfg, &ctx).unwrap().loss.scalar_value();
        assert_ne!(scd, coord);
    }

    #[test]
    fn scd_requires_condition_enabled_model() {
        let cfg = ModelConfig {
            embedding_dim: 16,
            num_layers: 1,
            num_heads: 2,
            cutoff: 4.0,
            num_radial_basis: 8,
            condition_enabled: false,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 1).unwrap();
        let s = molecule(4, 12);
        let g = Graph::new();
        let staged = model.stage(&g);
        let err = scd_loss(
            &staged,
            &[(0, &s)],
            &ObjectiveConfig::default(),
            &LossCtx::eval(1, 0),
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::ConditionDisabled { .. }));
        // Config validation catches the same mismatch up front.
        assert!(ObjectiveConfig::default().validate(false).is_err());
        assert!(ObjectiveConfig::default().validate(true).is_ok());
    }

    #[test]
    fn condition_dropout_empirical_rate() {
        let trials = 100_000u64;
        let dropped = (0..trials)
            .filter(|&i| condition_dropped(99, 0, i, 0.2))
            .count() as f64;
        let rate = dropped / trials as f64;
        assert!((0.195..=0.205).contains(&rate), "observed dropout rate {rate}");
    }

    #[test]
    fn detach_condition_changes_gradients_not_loss() {
        let mut model = small_model(14);
        randomize_conditioning(&mut model, 15);
        let s = molecule(6, 16);
        let samples = [(0u64, &s)];
        let ctx = LossCtx::eval(23, 1);
        let run = |detach: bool| {
            let cfg = ObjectiveConfig {
                condition_dropout_rate: 0.0,
                detach_condition: detach,
                ..Default::default()
            };
            let g = Graph::new();
            let staged = model.stage(&g);
            let out = scd_loss(&staged, &samples, &cfg, &ctx).unwrap();
            let grads = backward(&out.loss, false);
            (out.loss.scalar_value(), staged.param_grads(&grads))
        };
        let (l1, g1) = run(false);
        let (l2, g2) = run(true);
        assert_eq!(l1.to_bits(), l2.to_bits(), "detaching must not change the forward value");
        let q_idx = model.param_index("layers.0.attn.w_q").unwrap();
        let (a, b) = (g1[q_idx].as_ref().unwrap(), g2[q_idx].as_ref().unwrap());
        assert!(
            a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-12),
            "detach had no effect on shared-parameter gradients"
        );
    }

    #[test]
    fn denoising_losses_rotation_invariant_with_rotated_noise() {
        // Rotating positions and ε together leaves both losses unchanged.
        let mut model = small_model(17);
        randomize_conditioning(&mut model, 18);
        let s = molecule(7, 19);
        let mut stream = corruption_stream(31, 0, 0);
        let cs = corrupt(&s, 0.04, 0.005, &mut stream).unwrap();
        let base = DenoiseSample {
            id: 0,
            clean: cs.clean.clone(),
            corrupted: cs.corrupted.clone(),
            noise: cs.noise.clone(),
        };
        let rot = {
            let (a, b) = (0.9f64, -0.4f64);
            let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
            let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        m[i][j] += rz[i][k] * ry[k][j];
                    }
                }
            }
            m
        };
        let rotv = |p: &[f64; 3]| {
            [
                rot[0][0] * p[0] + rot[0][1] * p[1] + rot[0][2] * p[2],
                rot[1][0] * p[0] + rot[1][1] * p[1] + rot[1][2] * p[2],
                rot[2][0] * p[0] + rot[2][1] * p[1] + rot[2][2] * p[2],
            ]
        };
        let rot_struct = |st: &AtomicStructure| {
            AtomicStructure::new(st.species.clone(), st.positions.iter().map(&rotv).collect())
        };
        let rotated = DenoiseSample {
            id: 0,
            clean: rot_struct(&base.clean),
            corrupted: rot_struct(&base.corrupted),
            noise: base.noise.iter().map(&rotv).collect(),
        };
        let cfg = ObjectiveConfig { condition_dropout_rate: 0.0, ..Default::default() };
        let ctx = LossCtx::eval(31, 0);
        let g = Graph::new();
        let staged = model.stage(&g);
        let c0 = coord_loss_prepared(&staged, &[base], &ctx).unwrap().loss.scalar_value();
        let c1 = coord_loss_prepared(&staged, &[rotated], &ctx).unwrap().loss.scalar_value();
        assert!((c0 - c1).abs() < 1e-9, "coord loss moved under rotation: {c0} vs {c1}");
        let rebuild = |src: &AtomicStructure| DenoiseSample {
            id: 0,
            clean: src.clone(),
            corrupted: src.clone(),
            noise: vec![[0.0; 3]; src.len()],
        };
        // And scd on a zero-noise pair for pass-1 coverage.
        let s0 = scd_loss_prepared(&staged, &[rebuild(&s)], &cfg, &ctx).unwrap().loss.scalar_value();
        let s1 = scd_loss_prepared(&staged, &[rebuild(&rot_struct(&s))], &cfg, &ctx)
            .unwrap()
            .loss
            .scalar_value();
        assert!((s0 - s1).abs() < 1e-9, "scd loss moved under rotation: {s0} vs {s1}");
    }

    // -- pair-conditional ---------------------------------------------------

    fn tagged_pair(seed: u64) -> AtomicStructure {
        let mut s = molecule(6, seed);
        s.tags = Some(vec![
            ComponentTag::A,
            ComponentTag::B,
            ComponentTag::A,
            ComponentTag::B,
            ComponentTag::A,
            ComponentTag::B,
        ]);
        s
    }

    #[test]
    fn pair_conditional_mirror_symmetry_bitwise() {
        // Swapping every tag and flipping the direction relabels the same
        // computation: identical positions, identical streams, equal losses.
        let mut model = small_model(21);
        randomize_conditioning(&mut model, 22);
        let s = tagged_pair(23);
        let mut swapped = s.clone();
        swapped.tags = Some(
            s.tags
                .as_ref()
                .unwrap()
                .iter()
                .map(|t| match t {
                    ComponentTag::A => ComponentTag::B,
                    ComponentTag::B => ComponentTag::A,
                })
                .collect(),
        );
        let ctx = LossCtx::eval(37, 4);
        let g = Graph::new();
        let staged = model.stage(&g);
        let ab = ObjectiveConfig {
            kind: ObjectiveKind::PairConditional,
            direction: Direction::EmbedADenoiseB,
            ..Default::default()
        };
        let ba = ObjectiveConfig { direction: Direction::EmbedBDenoiseA, ..ab.clone() };
        let l1 = pair_conditional_loss(&staged, &[(0, &s), (1, &swapped)], &ab, &ctx)
            .unwrap()
            .loss
            .scalar_value();
        let l2 = pair_conditional_loss(&staged, &[(0, &swapped), (1, &s)], &ba, &ctx)
            .unwrap()
            .loss
            .scalar_value();
        assert_eq!(l1.to_bits(), l2.to_bits());
    }

    #[test]
    fn pair_conditional_error_cases() {
        let model = small_model(24);
        let g = Graph::new();
        let staged = model.stage(&g);
        let ctx = LossCtx::eval(1, 0);
        let cfg = ObjectiveConfig { kind: ObjectiveKind::PairConditional, ..Default::default() };
        // Untagged structure.
        let plain = molecule(4, 25);
        let err = pair_conditional_loss(&staged, &[(0, &plain)], &cfg, &ctx).unwrap_err();
        assert!(matches!(err, ObjectiveError::Geometry(GeometryError::MissingTags)));
        // All-A structure has no B component to denoise.
        let mut all_a = molecule(4, 26);
        all_a.tags = Some(vec![ComponentTag::A; 4]);
        let err = pair_conditional_loss(&staged, &[(0, &all_a)], &cfg, &ctx).unwrap_err();
        assert!(matches!(err, ObjectiveError::Geometry(GeometryError::EmptyComponent { .. })));
    }

    #[test]
    fn pair_conditional_zero_sigma_is_model_magnitude() {
        // σ_corr = 0 makes ε = 0, so the loss is the mean square of v_L1 on
        // the target atoms of the *unperturbed* structure.
        let model = small_model(27);
        let s = tagged_pair(28);
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::PairConditional,
            sigma_corr: 0.0,
            sigma_reg: 0.0,
            ..Default::default()
        };
        let ctx = LossCtx::eval(41, 0);
        let g = Graph::new();
        let staged = model.stage(&g);
        let loss = pair_conditional_loss(&staged, &[(0, &s)], &cfg, &ctx).unwrap().loss.scalar_value();
        // Zero-init conditioning: the condition is inert, so compare with a
        // plain forward on the clean structure.
        let out = staged.forward(&s, None, &mut ForwardMode::eval()).unwrap();
        let (_, b_idx) = extract_component(&s, ComponentTag::B).unwrap();
        let direct = out.v_l1.gather_rows(&b_idx).square().mean_all().scalar_value();
        assert!((loss - direct).abs() < 1e-15);
    }

    // -- force-energy ---------------------------------------------------------

    #[test]
    fn force_energy_forward_perfect_labels_give_zero() {
        let model = small_model(29);
        let mut s = molecule(5, 30);
        let g = Graph::new();
        let staged = model.stage(&g);
        let out = staged.forward(&s, None, &mut ForwardMode::eval()).unwrap();
        s.labels.energy = Some(out.y_l0.scalar_value());
        s.labels.forces = Some(
            out.v_l1
                .data()
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
        );
        let cfg = ObjectiveConfig { kind: ObjectiveKind::ForceEnergy, ..Default::default() };
        let loss = force_energy_loss(&staged, &[(0, &s)], &cfg, &LossCtx::eval(1, 0))
            .unwrap()
            .loss
            .scalar_value();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn force_energy_weighting_algebra() {
        let model = small_model(31);
        let mut s = molecule(5, 32);
        s.labels.energy = Some(1.25);
        s.labels.forces = Some(vec![[0.1, -0.2, 0.05]; 5]);
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::ForceEnergy,
            energy_weight: 0.8,
            force_weight: 0.2,
            ..Default::default()
        };
        let g = Graph::new();
        let staged = model.stage(&g);
        let out = force_energy_loss(&staged, &[(0, &s)], &cfg, &LossCtx::eval(2, 0)).unwrap();
        let comp: BTreeMap<_, _> = out.components.iter().copied().collect();
        let want = 0.8 * comp["energy"] + 0.2 * comp["force"];
        assert!((out.loss.scalar_value() - want).abs() < 1e-12);
        assert!(comp["energy"] > 0.0 && comp["force"] > 0.0);
    }

    #[test]
    fn force_energy_missing_labels_error() {
        let model = small_model(33);
        let s = molecule(4, 34);
        let g = Graph::new();
        let staged = model.stage(&g);
        let cfg = ObjectiveConfig { kind: ObjectiveKind::ForceEnergy, ..Default::default() };
        let err = force_energy_loss(&staged, &[(0, &s)], &cfg, &LossCtx::eval(1, 0)).unwrap_err();
        assert!(matches!(err, ObjectiveError::MissingLabel { .. }));
    }

    #[test]
    fn backward_forces_quadratic_surrogate_oracle() {
        // y = Σ_{i<j} ||r_i - r_j||²: the gradient w.r.t. r_i is
        // 2·Σ_{j≠i}(r_i - r_j), so forces are the negative of that.
        let g = Graph::new();
        let coords = vec![[0.1, 0.2, 0.3], [1.0, -0.5, 0.25], [-0.75, 0.4, 2.0], [0.5, 1.5, -1.0]];
        let n = coords.len();
        let pos = g.leaf(coords.iter().flatten().copied().collect(), &[n, 3]);
        let mut y: Option<Var> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                let d = pos.gather_rows(&[i]).sub(&pos.gather_rows(&[j]));
                let t = d.square().sum_all();
                y = Some(match y {
                    Some(acc) => acc.add(&t),
                    None => t,
                });
            }
        }
        let forces = backward_forces(&y.unwrap(), &pos, false).data();
        for i in 0..n {
            let mut want = [0.0; 3];
            for j in 0..n {
                if i != j {
                    for k in 0..3 {
                        want[k] -= 2.0 * (coords[i][k] - coords[j][k]);
                    }
                }
            }
            for k in 0..3 {
                assert!(
                    (forces[i * 3 + k] - want[k]).abs() < 1e-9,
                    "atom {i} axis {k}: {} vs {}",
                    forces[i * 3 + k],
                    want[k]
                );
            }
        }
    }

    #[test]
    fn backward_mode_forces_sum_to_zero() {
        // The scalar head is translation invariant, so its coordinate
        // gradient must sum to (numerically) zero over atoms. A freshly
        // initialized *conditional* model has all gates closed (y does not
        // depend on positions at all), so use an unconditional one.
        let cfg = ModelConfig {
            embedding_dim: 16,
            num_layers: 2,
            num_heads: 2,
            cutoff: 4.0,
            num_radial_basis: 8,
            condition_enabled: false,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 35).unwrap();
        let s = molecule(6, 36);
        let g = Graph::new();
        let staged = model.stage(&g);
        let (pos, ng) = staged.prepare(&s).unwrap();
        let out = staged.forward_prepared(&s, &pos, &ng, None, &mut ForwardMode::eval());
        let f = backward_forces(&out.y_l0, &pos, false).data();
        for k in 0..3 {
            let total: f64 = f.iter().skip(k).step_by(3).sum();
            assert!(total.abs() < 1e-9, "net force along axis {k}: {total}");
        }
        assert!(f.iter().any(|v| v.abs() > 1e-12), "forces vanished entirely");
    }

    #[test]
    fn backward_mode_loss_is_differentiable() {
        // The conservative-force loss goes through a gradient-of-gradient
        // path; every parameter that feeds the scalar head must get one.
        // Randomize the conditioning output layers so the gates are open and
        // the scalar head actually depends on positions.
        let mut model = small_model(37);
        randomize_conditioning(&mut model, 99);
        let mut s = molecule(5, 38);
        s.labels.energy = Some(0.3);
        s.labels.forces = Some(vec![[0.01, 0.0, -0.02]; 5]);
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::ForceEnergy,
            force_mode: ForceMode::Backward,
            ..Default::default()
        };
        let g = Graph::new();
        let staged = model.stage(&g);
        let out = force_energy_loss(&staged, &[(0, &s)], &cfg, &LossCtx::eval(3, 0)).unwrap();
        assert!(out.loss.scalar_value() > 0.0);
        let grads = backward(&out.loss, false);
        let gv = staged.param_grads(&grads);
        let w1 = model.param_index("head.scalar.w1").unwrap();
        assert!(gv[w1].as_ref().unwrap().iter().any(|v| *v != 0.0));
        let wq = model.param_index("layers.0.attn.w_q").unwrap();
        assert!(gv[wq].as_ref().unwrap().iter().any(|v| *v != 0.0));
    }

    // -- finetune -------------------------------------------------------------

    #[test]
    fn standardization_oracle_and_errors() {
        let st = Standardization::fit(&[1.0, 3.0]).unwrap();
        assert_eq!(st.mean, 2.0);
        assert_eq!(st.std, 1.0);
        assert_eq!(st.apply(3.0), 1.0);
        assert_eq!(st.invert(st.apply(-7.25)), -7.25);
        assert!(matches!(
            Standardization::fit(&[5.0, 5.0, 5.0]),
            Err(ObjectiveError::ZeroVariance { n: 3, .. })
        ));
        assert!(matches!(Standardization::fit(&[]), Err(ObjectiveError::EmptyBatch)));
    }

    #[test]
    fn reference_energy_subtraction_oracle() {
        // H₂ labeled −1.6 with reference {H: −0.5}: −1.6 − 2·(−0.5) = −0.6.
        let mut h2 = AtomicStructure::new(vec![1, 1], vec![[0.0; 3], [0.74, 0.0, 0.0]]);
        h2.labels.energy = Some(-1.6);
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::Finetune,
            subtract_reference_energy: true,
            reference_energies: [("H".to_string(), -0.5)].into(),
            ..Default::default()
        };
        assert!((effective_target(&h2, &cfg).unwrap() - (-0.6)).abs() < 1e-15);
        // Missing reference for a present species is an error.
        let mut h2o = AtomicStructure::new(vec![8, 1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        h2o.labels.energy = Some(-3.0);
        assert!(matches!(
            effective_target(&h2o, &cfg),
            Err(ObjectiveError::MissingReference { .. })
        ));
        // Missing target key.
        let bare = AtomicStructure::new(vec![1], vec![[0.0; 3]]);
        assert!(matches!(
            effective_target(&bare, &cfg),
            Err(ObjectiveError::MissingLabel { .. })
        ));
    }

    #[test]
    fn finetune_loss_composition_and_ema() {
        let model = small_model(39);
        let mut s = molecule(5, 40);
        s.labels.energy = Some(2.5);
        let stats = Standardization { mean: 1.0, std: 2.0 };
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::Finetune,
            denoise_weight: 0.1,
            loss_ema: 0.05,
            sigma_reg: 0.005,
            ..Default::default()
        };
        let ctx = LossCtx::eval(43, 0);
        let g = Graph::new();
        let staged = model.stage(&g);
        let mut ema = LossEma::default();
        let out = finetune_loss(&staged, &[(0, &s)], &cfg, &stats, &mut ema, &ctx).unwrap();
        let comp: BTreeMap<_, _> = out.components.iter().copied().collect();
        // First call: EMA is seeded with the primary value, so the scaled
        // primary is exactly 1 (primary > 1e-8 here).
        assert!(comp["primary"] > 1e-8);
        assert_eq!(comp["ema"], comp["primary"]);
        assert_eq!(ema.value.unwrap(), comp["primary"]);
        let want = 1.0 + 0.1 * comp["denoise"];
        assert!((out.loss.scalar_value() - want).abs() < 1e-12);
        // Second call on the same batch: EMA already equals the primary, so
        // the update is a fixed point and the scaled primary stays 1.
        let out2 = finetune_loss(&staged, &[(0, &s)], &cfg, &stats, &mut ema, &ctx).unwrap();
        assert_eq!(ema.value.unwrap(), comp["primary"]);
        assert!((out2.loss.scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn finetune_without_ema_or_denoise_is_plain_mse() {
        let model = small_model(41);
        let mut s = molecule(4, 42);
        s.labels.energy = Some(-0.75);
        let stats = Standardization::identity();
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::Finetune,
            denoise_weight: 0.0,
            loss_ema: 0.0,
            sigma_reg: 0.0,
            ..Default::default()
        };
        let ctx = LossCtx::eval(47, 0);
        let g = Graph::new();
        let staged = model.stage(&g);
        let mut ema = LossEma::default();
        let out = finetune_loss(&staged, &[(0, &s)], &cfg, &stats, &mut ema, &ctx).unwrap();
        // σ_reg = 0: the model sees the pristine structure; the loss is the
        // plain squared error of y_L0 against the raw target.
        let fwd = staged.forward(&s, None, &mut ForwardMode::eval()).unwrap();
        let want = (fwd.y_l0.scalar_value() - (-0.75)).powi(2);
        assert!((out.loss.scalar_value() - want).abs() < 1e-15);
    }

    #[test]
    fn predict_scalar_round_trips_standardization() {
        let model = small_model(43);
        let s = molecule(4, 44);
        let stats = Standardization { mean: -3.0, std: 0.5 };
        let cfg = ObjectiveConfig { kind: ObjectiveKind::Finetune, ..Default::default() };
        let g = Graph::new();
        let staged = model.stage(&g);
        let y = predict_scalar(&staged, &s, &cfg, &stats).unwrap();
        let raw = staged
            .forward(&s, None, &mut ForwardMode::eval())
            .unwrap()
            .y_l0
            .scalar_value();
        assert!((y - (raw * 0.5 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn config_validation_errors() {
        let bad = ObjectiveConfig { condition_dropout_rate: 1.5, ..Default::default() };
        assert!(matches!(bad.validate(true), Err(ObjectiveError::BadConfig(_))));
        let bad = ObjectiveConfig { sigma_corr: -0.1, ..Default::default() };
        assert!(matches!(bad.validate(true), Err(ObjectiveError::BadConfig(_))));
        let bad = ObjectiveConfig { loss_ema: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(true), Err(ObjectiveError::BadConfig(_))));
        let bad = ObjectiveConfig {
            kind: ObjectiveKind::Finetune,
            target_key: String::new(),
            ..Default::default()
        };
        assert!(matches!(bad.validate(true), Err(ObjectiveError::BadConfig(_))));
    }

    #[test]
    fn empty_batch_is_an_error_everywhere() {
        let model = small_model(45);
        let g = Graph::new();
        let staged = model.stage(&g);
        let cfg = ObjectiveConfig::default();
        let ctx = LossCtx::eval(1, 0);
        assert!(matches!(
            coord_loss(&staged, &[], &cfg, &ctx),
            Err(ObjectiveError::EmptyBatch)
        ));
        assert!(matches!(scd_loss(&staged, &[], &cfg, &ctx), Err(ObjectiveError::EmptyBatch)));
        assert!(matches!(
            force_energy_loss(&staged, &[], &cfg, &ctx),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    use crate::backbone::ForwardMode;
}
