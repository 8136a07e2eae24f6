//! Counter-keyed random streams.
//!
//! Every random draw in the crate comes from a generator keyed by
//! `(seed, index, stage)`, so results do not depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stage identifiers separating independent streams for the same sample.
pub mod stage {
    pub const TEXT: u64 = 1;
    pub const DEGRADE: u64 = 2;
    pub const DEGRADE_SECOND: u64 = 3;
    pub const TRAIN_BATCH: u64 = 4;
    pub const TRAIN_NOISE: u64 = 5;
    pub const SAMPLE_NOISE: u64 = 6;
    pub const OCR_NOISE: u64 = 7;
    pub const INIT: u64 = 8;
    pub const SPLIT: u64 = 9;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into one 64-bit seed.
pub fn derive_seed(seed: u64, index: u64, stage: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ index) ^ stage.rotate_left(32))
}

pub fn keyed_rng(seed: u64, index: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index, stage))
}

/// `n` standard normal draws from the keyed stream.
pub fn normal_vec(seed: u64, index: u64, stage: u64, n: usize) -> Vec<f64> {
    let mut rng = keyed_rng(seed, index, stage);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}
