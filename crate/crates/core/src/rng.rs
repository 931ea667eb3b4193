//! Seed derivation for independent random streams.
//!
//! Every stochastic component draws from its own `ChaCha8Rng` whose seed is
//! derived from the run seed plus a tuple of stream identifiers (client id,
//! round, purpose tag). Streams are therefore independent of scheduling order,
//! which keeps parallel client training bit-identical to the sequential path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const INIT_PROXY: u64 = 1;
    pub const INIT_PRIVATE: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const LOCAL_TRAIN: u64 = 5;
    pub const DATA: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, parts))
}
