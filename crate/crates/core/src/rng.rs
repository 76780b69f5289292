//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream identified by a run seed, a purpose tag, and a stream index
//! (usually a trajectory index), so that a trajectory's noise does not depend
//! on how many other trajectories are simulated alongside it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of tags into a new seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Independent generator for stream `index` of `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub(crate) mod tags {
    pub const BROWNIAN: u64 = 0xB0;
    pub const INITIAL: u64 = 0x10;
    pub const BATCH: u64 = 0xBA;
    pub const INIT_PARAMS: u64 = 0x9A;
    pub const EPOCH: u64 = 0xE0;
    pub const SIMULATE: u64 = 0x51;
    pub const EVALUATE: u64 = 0xEA;
}
