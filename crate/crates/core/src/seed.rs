//! Deterministic seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a seed derived
//! from the user seed and a fixed stream tag, so that parallel work items draw
//! from independent streams regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of stream tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, tags))
}

// Stream tags.
pub const ZCA_SAMPLE: u64 = 1;
pub const LAYER: u64 = 2;
pub const INIT: u64 = 3;
pub const PATCHES: u64 = 4;
pub const REINIT: u64 = 5;
pub const COMPLETION: u64 = 6;
pub const KMEANS: u64 = 7;
pub const TRIAL: u64 = 8;
pub const SAMPLER: u64 = 9;
pub const LABEL_SUBSET: u64 = 10;
