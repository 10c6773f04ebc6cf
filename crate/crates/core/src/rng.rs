//! Seed derivation. Every random stream in the simulator is a ChaCha8 generator
//! keyed by the run seed plus a purpose tag, so that adding a consumer never
//! perturbs an existing stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod tag {
    pub const DATASET: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const CORRUPTION: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const REGIONS: u64 = 6;
    pub const TRACE: u64 = 7;
    pub const SELECTION: u64 = 8;
    pub const LOCAL_TRAIN: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with any number of discriminators into a new seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}
