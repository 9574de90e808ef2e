//! Deterministic seed derivation and random streams.
//!
//! A single experiment seed fans out into independent streams through a
//! counter-based SplitMix64 hash, so two runs with the same seed replay the
//! exact same draws regardless of how many streams each phase opens.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The random stream used everywhere in the crate.
pub type Stream = ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby inputs.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a child seed from `(seed, label)`.
///
/// Labels are small fixed constants per stream (data, teacher, dmd, ...),
/// so streams with the same parent seed never alias.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label.wrapping_add(0x51ed_270b)))
}

/// Open a deterministic stream for `(seed, label)`.
pub fn stream(seed: u64, label: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Stream labels for the pipeline phases. Keeping them in one place makes
/// cross-phase collisions impossible to introduce by accident.
pub mod labels {
    pub const DATA: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const DMD: u64 = 3;
    pub const PAD_STAGE_BASE: u64 = 4; // +k for stage k
    pub const EVAL: u64 = 16;
    pub const INIT: u64 = 32;
}
