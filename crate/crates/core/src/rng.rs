//! Seed derivation.
//!
//! Every random stream in the crate is derived from a `(seed, stream)` pair
//! with [`derive_seed`], so any single run can be reproduced in isolation
//! from the global seed. The rule is two rounds of SplitMix64 finalization:
//!
//! ```text
//! derive_seed(seed, stream) = mix(mix(seed) ^ mix(stream ^ 0x9E3779B97F4A7C15))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod stream {
    pub const DATASET: u64 = 1;
    pub const ORACLE: u64 = 2;
    pub const BATCH: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const TEACHER: u64 = 7;
    pub const LOO_SUBSET: u64 = 8;
    pub const DATASET_SEED: u64 = 9;
    pub const RUN_SEED: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(stream ^ 0x9E37_79B9_7F4A_7C15))
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream))
}
