//! `scd` — command-line surface for the self-conditioned denoising
//! framework: dataset generation, pretraining, finetuning, evaluation,
//! embedding export, and the gradient-check diagnostic.
//!
//! Conventions: every successful command prints exactly one JSON summary
//! line to stdout (artifacts go to files); every failure prints one JSON
//! error line to stderr and exits nonzero (2 for usage problems, 1
//! otherwise). Outputs are reproducible from config + seed; the only
//! timestamp anywhere is the advisory `wall_ms` field in metrics records.

use clap::{Parser, Subcommand};
use scd_core::backbone::{ForwardMode, Model, ModelConfigError};
use scd_core::config::{ConfigError, RunConfig};
use scd_core::geometry::{parse_xyz, write_xyz, AtomicStructure, GeometryError, XyzError};
use scd_core::metrics::{eval_report, extensivity_report};
use scd_core::objectives::{
    objective_loss, predict_scalar, FinetuneState, ForceMode, LossCtx, LossEma, ObjectiveConfig,
    ObjectiveError, ObjectiveKind, Standardization,
};
use scd_core::synthetic::{self, FamilyKind};
use scd_core::tensor::{backward, finite_difference_grad, Graph};
use scd_core::trainer::{
    load_checkpoint, train, CheckpointError, Phase, TrainError, TrainSinks,
};
use serde_json::json;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use thiserror::Error;

#[derive(Parser)]
#[command(
    name = "scd",
    version,
    about = "Self-conditioned denoising pretraining for atomistic graph networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain with a denoising objective (coord, scd, pair_conditional,
    /// force_energy).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finetune on a scalar target, from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from (usually a pretraining final.ckpt).
        #[arg(long)]
        from: Option<PathBuf>,
        /// Train from random initialization instead of a checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Re-initialize the scalar head even if the config says otherwise.
        #[arg(long)]
        reset_head: bool,
    },
    /// Score a checkpoint's scalar predictions against labels.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Label key ("energy" or a named scalar).
        #[arg(long)]
        target: String,
    },
    /// Export per-structure condition embeddings plus an extensivity report.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path (header, then one row per structure).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset as multi-frame extended XYZ.
    GenData {
        /// conformer_pairs, morse_clusters, toy_crystals, or pair_complexes.
        #[arg(long)]
        family: String,
        /// Units to generate (molecules for conformer_pairs — two frames
        /// each — otherwise frames).
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare autodiff gradients against finite differences for every
    /// parameter under every objective. Needs a small model (≤ 2 layers,
    /// embedding_dim ≤ 16).
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("failed to parse dataset: {0}")]
    Xyz(#[from] XyzError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Model(_) => "config",
            CliError::Geometry(_) => "data",
            CliError::Xyz(_) => "data",
            CliError::Objective(_) => "objective",
            CliError::Train(_) => "train",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::GradcheckFailed(_) => "gradcheck",
            CliError::Io(_) => "io",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders multi-line help; usage errors still get the
            // machine-readable single line on stderr.
            if e.use_stderr() {
                eprintln!(
                    "{}",
                    json!({"kind": "usage", "error": e.to_string().lines().next().unwrap_or("bad arguments")})
                );
                return ExitCode::from(2);
            }
            // --help / --version output goes to stdout with exit 0.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"kind": e.kind(), "error": e.to_string()}));
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Pretrain { config } => cmd_pretrain(&config),
        Command::Finetune { config, from, from_scratch, reset_head } => {
            cmd_finetune(&config, from.as_deref(), from_scratch, reset_head)
        }
        Command::Evaluate { ckpt, data, target } => cmd_evaluate(&ckpt, &data, &target),
        Command::Embed { ckpt, data, out } => cmd_embed(&ckpt, &data, &out),
        Command::GenData { family, n, seed, out } => cmd_gen_data(&family, n, seed, &out),
        Command::Gradcheck { config } => cmd_gradcheck(&config),
    }
}

fn load_dataset(path: &Path) -> Result<Vec<AtomicStructure>, CliError> {
    Ok(parse_xyz(&fs::read_to_string(path)?)?)
}

/// Create the output directory and write the fully-resolved config into it.
fn prepare_run_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("config.resolved.toml"), cfg.resolved_toml())?;
    Ok(())
}

fn run_training(mut model: Model, cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = load_dataset(cfg.train_data()?)?;
    prepare_run_dir(cfg)?;
    let metrics_file = fs::File::create(cfg.output_dir.join("metrics.jsonl"))?;
    let mut metrics = BufWriter::new(metrics_file);
    let summary = {
        let mut sinks = TrainSinks {
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(&cfg.output_dir),
        };
        train(&mut model, &dataset, &cfg.train, &cfg.objective, None, &mut sinks)?
    };
    metrics.flush()?;
    println!(
        "{}",
        json!({
            "phase": cfg.train.phase.name(),
            "steps": summary.steps_run,
            "frames": dataset.len(),
            "final_loss": summary.final_loss,
            "final_checkpoint": summary.final_checkpoint,
        })
    );
    Ok(())
}

fn cmd_pretrain(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if cfg.train.phase != Phase::Pretrain {
        return Err(CliError::Usage("pretrain needs train.phase = \"pretrain\"".into()));
    }
    if cfg.objective.kind == ObjectiveKind::Finetune {
        return Err(CliError::Usage(
            "objective.kind = \"finetune\" belongs to the finetune command".into(),
        ));
    }
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    run_training(model, &cfg)
}

fn cmd_finetune(
    config: &Path,
    from: Option<&Path>,
    from_scratch: bool,
    reset_head: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if reset_head {
        cfg.train.reset_head = true;
    }
    if cfg.train.phase != Phase::Finetune {
        return Err(CliError::Usage("finetune needs train.phase = \"finetune\"".into()));
    }
    let model = match (from, from_scratch) {
        (Some(path), false) => load_checkpoint(path)?.model,
        (None, true) => Model::new(cfg.model.clone(), cfg.train.seed)?,
        (Some(_), true) => {
            return Err(CliError::Usage("--from and --from-scratch are mutually exclusive".into()))
        }
        (None, false) => {
            return Err(CliError::Usage(
                "finetune needs --from CKPT (or --from-scratch to opt out explicitly)".into(),
            ))
        }
    };
    // The architecture comes from the checkpoint; the resolved config
    // records what actually ran.
    cfg.model = model.cfg.clone();
    cfg.validate()?;
    run_training(model, &cfg)
}

fn cmd_evaluate(ckpt: &Path, data: &Path, target: &str) -> Result<(), CliError> {
    let loaded = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(CliError::Train(TrainError::EmptyDataset));
    }
    let stats = loaded.meta.standardization.unwrap_or_else(Standardization::identity);
    let mut cfg = loaded.meta.objective.clone();
    cfg.target_key = target.to_string();

    let mut preds = Vec::with_capacity(dataset.len());
    let mut labels = Vec::with_capacity(dataset.len());
    for s in &dataset {
        let label = s
            .labels
            .scalar(target)
            .ok_or_else(|| ObjectiveError::MissingLabel { what: target.to_string() })?;
        let graph = Graph::new();
        let staged = loaded.model.stage(&graph);
        preds.push(predict_scalar(&staged, s, &cfg, &stats)?);
        labels.push(label);
    }
    let report = eval_report(&preds, &labels);
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_embed(ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let loaded = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(CliError::Train(TrainError::EmptyDataset));
    }
    let d = loaded.model.cfg.embedding_dim;
    let mut csv = String::new();
    csv.push_str("id,n_atoms");
    for k in 0..d {
        csv.push_str(&format!(",c{k}"));
    }
    csv.push('\n');
    let mut counts = Vec::with_capacity(dataset.len());
    let mut embeddings = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.iter().enumerate() {
        let graph = Graph::new();
        let staged = loaded.model.stage(&graph);
        let outp = staged.forward(s, None, &mut ForwardMode::eval())?;
        let c = outp.c_out.data();
        csv.push_str(&format!("{i},{}", s.len()));
        for v in &c {
            // Shortest representation that round-trips f64 exactly.
            csv.push_str(&format!(",{v:?}"));
        }
        csv.push('\n');
        counts.push(s.len());
        embeddings.push(c);
    }
    fs::write(out, csv)?;
    let report = extensivity_report(&counts, &embeddings);
    println!(
        "{}",
        json!({
            "out": out,
            "n_structures": report.n_structures,
            "norm_pearson": report.norm_pearson,
            "pc1_pearson": report.pc1_pearson,
        })
    );
    Ok(())
}

fn cmd_gen_data(family: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let kind: FamilyKind = family.parse().map_err(CliError::Usage)?;
    let frames = synthetic::generate(kind, n, seed);
    fs::write(out, write_xyz(&frames))?;
    println!(
        "{}",
        json!({"family": kind.name(), "frames": frames.len(), "seed": seed, "out": out})
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// All parameters flattened into one vector (finite differences run over
/// this vector, so every parameter of every tensor is probed).
fn flatten_params(model: &Model) -> Vec<f64> {
    model.params().iter().flat_map(|p| p.data.iter().copied()).collect()
}

fn set_params(model: &mut Model, flat: &[f64]) {
    let mut offset = 0;
    for i in 0..model.num_params() {
        let data = model.param_data_mut(i);
        let n = data.len();
        data.copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len());
}

fn gradcheck_objectives() -> Vec<(&'static str, ObjectiveConfig, f64)> {
    let base = ObjectiveConfig::default();
    let mut out = Vec::new();
    out.push((
        "coord",
        ObjectiveConfig { kind: ObjectiveKind::Coord, ..base.clone() },
        1e-5,
    ));
    out.push((
        "scd",
        ObjectiveConfig {
            kind: ObjectiveKind::Scd,
            condition_dropout_rate: 0.0,
            ..base.clone()
        },
        1e-5,
    ));
    out.push((
        "pair_conditional",
        ObjectiveConfig { kind: ObjectiveKind::PairConditional, ..base.clone() },
        1e-5,
    ));
    out.push((
        "force_energy_forward",
        ObjectiveConfig {
            kind: ObjectiveKind::ForceEnergy,
            force_mode: ForceMode::Forward,
            ..base.clone()
        },
        1e-5,
    ));
    out.push((
        "force_energy_backward",
        ObjectiveConfig {
            kind: ObjectiveKind::ForceEnergy,
            force_mode: ForceMode::Backward,
            ..base.clone()
        },
        1e-4,
    ));
    out.push(("finetune", ObjectiveConfig { kind: ObjectiveKind::Finetune, ..base }, 1e-5));
    out
}

fn cmd_gradcheck(config: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    if cfg.model.embedding_dim > 16 || cfg.model.num_layers > 2 {
        return Err(CliError::Usage(format!(
            "gradcheck needs a small model (embedding_dim ≤ 16, num_layers ≤ 2); got d={} L={}",
            cfg.model.embedding_dim, cfg.model.num_layers
        )));
    }
    let seed = cfg.train.seed;

    // Tagged two-component structures with analytic energy/force labels
    // satisfy the preconditions of every objective at once.
    let mut frames = synthetic::pair_complexes(2, seed);
    for s in &mut frames {
        let (e, f) = synthetic::morse_energy_forces(&s.positions);
        s.labels.energy = Some(e);
        s.labels.forces = Some(f);
    }
    let samples: Vec<(u64, &AtomicStructure)> =
        frames.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();

    let mut model = Model::new(cfg.model.clone(), seed)?;
    // Kick every parameter off its structured zero (conditioning output
    // layers, gates, scalar-head biases), otherwise whole gradient blocks
    // are trivially zero and the check proves nothing.
    {
        use rand::Rng;
        use rand::SeedableRng;
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
        for i in 0..model.num_params() {
            for v in model.param_data_mut(i) {
                *v += r.gen_range(-0.05..0.05);
            }
        }
    }
    let targets: Vec<f64> = frames.iter().map(|s| s.labels.energy.unwrap()).collect();
    let stats = Standardization::fit(&targets)?;
    let ctx = LossCtx::eval(seed, 0);
    // The finetune loss divides by the loss EMA from previous steps — fixed
    // state, constant under differentiation. A fresh EMA would initialize to
    // the current primary value, making the loss identically 1 under finite
    // differences while autodiff sees the scaled primary. Pin it.
    let pinned_ema = LossEma { value: Some(0.5) };

    let loss_value = |model: &Model, obj: &ObjectiveConfig| -> Result<f64, CliError> {
        let graph = Graph::new();
        let staged = model.stage(&graph);
        let mut ema = pinned_ema;
        let ft = (obj.kind == ObjectiveKind::Finetune)
            .then(|| FinetuneState { stats: &stats, ema: &mut ema });
        Ok(objective_loss(&staged, &samples, obj, &ctx, ft)?.loss.scalar_value())
    };

    let flat0 = flatten_params(&model);
    let mut results = Vec::new();
    let mut all_pass = true;
    for (name, obj, tol) in gradcheck_objectives() {
        // Autodiff gradient at the base point.
        let autodiff: Vec<f64> = {
            let graph = Graph::new();
            let staged = model.stage(&graph);
            let mut ema = pinned_ema;
            let ft = (obj.kind == ObjectiveKind::Finetune)
                .then(|| FinetuneState { stats: &stats, ema: &mut ema });
            let computed = objective_loss(&staged, &samples, &obj, &ctx, ft)?;
            let grads = backward(&computed.loss, false);
            staged
                .param_grads(&grads)
                .iter()
                .zip(model.params())
                .flat_map(|(g, p)| match g {
                    Some(g) => g.clone(),
                    None => vec![0.0; p.data.len()],
                })
                .collect()
        };
        let mut probe = Model::new(cfg.model.clone(), seed)?;
        let mut f = |x: &[f64]| -> f64 {
            set_params(&mut probe, x);
            loss_value(&probe, &obj).expect("loss evaluation inside finite differences")
        };
        let fd = finite_difference_grad(&mut f, &flat0, 1e-6);
        let mut max_rel = 0.0_f64;
        for (a, g) in autodiff.iter().zip(&fd) {
            let rel = (a - g).abs() / a.abs().max(g.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        let pass = max_rel < tol;
        all_pass &= pass;
        results.push(json!({
            "objective": name,
            "parameters": flat0.len(),
            "max_rel_err": max_rel,
            "tolerance": tol,
            "pass": pass,
        }));
    }
    println!("{}", json!({"pass": all_pass, "objectives": results}));
    if all_pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed("see report on stdout".into()))
    }
}
