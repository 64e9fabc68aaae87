//! Deterministic RNG streams keyed by experiment coordinates.
//!
//! Every random decision in the pipeline draws from a stream derived from the
//! experiment seed plus a fixed tuple of tags (phase, round, iteration, sample),
//! so results never depend on how many values an earlier step consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags for the distinct consumers of randomness.
pub mod tag {
    pub const SYNTH_SOURCE: u64 = 1;
    pub const SYNTH_TARGET: u64 = 2;
    pub const INIT: u64 = 3;
    pub const WARMUP_BATCH: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const HPLA: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
}
