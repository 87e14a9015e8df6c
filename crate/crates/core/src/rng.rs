//! Deterministic RNG stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from
//! `(base_seed, purpose tag, context words...)` via a splitmix64 chain.
//! Because streams are derived rather than consumed from one global RNG,
//! resuming a run at step `k` reproduces the exact draws of an uninterrupted
//! run: the "RNG state" of a checkpoint is just the base seed plus the step
//! counter.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping unrelated streams independent even for equal context
/// words. Values are arbitrary but frozen: changing them changes every run.
pub mod tag {
    /// Parameter initialization (context: parameter index in registry order).
    pub const INIT: u64 = 0x01;
    /// Corruption noise (context: step, sample).
    pub const CORRUPT: u64 = 0x02;
    /// Drop-path draws for the denoising/primary pass (context: step, sample).
    ///
    /// The single forward pass of the node-denoising objective uses this same
    /// tag, so SCD with condition dropout 1.0 consumes RNG identically to the
    /// plain objective and the two losses agree exactly on a batch.
    pub const DROP_PATH_DENOISE: u64 = 0x03;
    /// Drop-path draws for the conditioning/embedding pass (context: step, sample).
    pub const DROP_PATH_EMBED: u64 = 0x04;
    /// Per-sample condition dropout decision (context: step, sample).
    pub const COND_DROP: u64 = 0x05;
    /// Epoch shuffling (context: epoch).
    pub const SHUFFLE: u64 = 0x06;
    /// Synthetic data generation (context: family id, frame index).
    pub const DATA: u64 = 0x07;
    /// Head re-initialization when finetuning with a reset head.
    pub const HEAD_RESET: u64 = 0x08;
    /// Cell-repeat augmentation (context: step, sample).
    pub const CELL_REPEAT: u64 = 0x09;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with context words into a single well-scrambled u64.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut acc = splitmix64(&mut state);
    for &w in words {
        state ^= w.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive an independent ChaCha8 stream for `(seed, words...)`.
pub fn stream(seed: u64, words: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = mix(seed, words);
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
