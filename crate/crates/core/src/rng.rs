//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit stream. Independent substreams
//! are derived from a root seed and a tag path, so trajectories, training
//! steps and examples can be generated in any order (or in parallel) and
//! still reproduce bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a tag path into a single 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Tags used to separate the roles a stream can play inside one routine.
pub mod tag {
    pub const BATCH: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const TIME: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const CHAIN: u64 = 5;
    pub const INIT: u64 = 6;
    pub const DATA: u64 = 7;
    pub const SELECT: u64 = 8;
    pub const ESTIMATE: u64 = 9;
    pub const SHIFT: u64 = 10;
    pub const TEST: u64 = 11;
}

#[inline]
pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
