//! Self-conditioned denoising (SCD) pretraining for atomistic graph networks.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: a minimal f64 tensor engine with tape-based reverse-mode
//!   autodiff. Adjoints are built from the same differentiable primitives,
//!   so gradients of gradients (needed for conservative forces) come for free.
//! - [`geometry`]: atomic structures, extended-XYZ I/O, neighbor graphs
//!   (periodic and open), corruption sampling, and augmentation.
//! - [`backbone`]: the conditional equivariant transformer. Invariant (L0)
//!   and equivariant (L1) channels, distance-modulated edge attention,
//!   adaptive layer norm driven by a structure-level condition vector.
//! - [`objectives`]: node denoising, self-conditioned denoising, pair
//!   conditional denoising, force/energy regression, and finetuning losses.
//! - [`trainer`]: AdamW, warmup + cosine schedule, the training loop,
//!   and versioned checkpoints.
//! - [`synthetic`]: deterministic desk-scale data families.
//! - [`metrics`]: regression metrics and the embedding extensivity report.
//! - [`config`]: the run configuration document shared by the CLI.

pub mod backbone;
pub mod config;
pub mod geometry;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
