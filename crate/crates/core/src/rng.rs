//! Seeded generators and deterministic seed splitting.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] whose
//! seed is derived from a master seed, a stream tag and an index. Streams are
//! independent of each other, so adding draws to one stream never shifts
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Stream tags used by the training and evaluation loops.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const TIMESTEP: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EVAL_SAMPLER: u64 = 5;
    pub const EVAL_TARGET: u64 = 6;
    pub const EVAL_PROJECTION: u64 = 7;
    pub const MONTE_CARLO: u64 = 8;
    pub const CHAIN: u64 = 9;
    pub const TRIAL: u64 = 10;
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(master, stream, index)`.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn derived_rng(master: u64, stream: u64, index: u64) -> LabRng {
    rng_from_seed(derive_seed(master, stream, index))
}
