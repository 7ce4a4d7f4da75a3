//! Seeded, hierarchically derived random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the global
//! seed plus a path of identifiers, so results do not depend on execution order
//! or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a path of stream identifiers.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &id| splitmix64(acc ^ splitmix64(id.wrapping_add(0xA5A5))))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Stream tags, so different subsystems never share a stream by accident.
pub mod tag {
    pub const TRAIN_SPLIT: u64 = 1;
    pub const TEST_SPLIT: u64 = 2;
    pub const PARAM_INIT: u64 = 3;
    pub const EPOCH_ORDER: u64 = 4;
    pub const PAIR: u64 = 5;
    pub const RFF_BASIS: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const DEMO: u64 = 8;
}
