//! Seeded randomness.
//!
//! Every stochastic step draws from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded
//! with `seed_from_u64` and separated into independent 64-bit streams with
//! `set_stream`. ChaCha8 output is specified bit-for-bit, so a seed reproduces
//! the same draws on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream identifiers keep unrelated consumers of one run seed independent.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const CAP: u64 = 2;
    pub const ENCODER_INIT: u64 = 3;
    pub const STAGE1_SHUFFLE: u64 = 4;
    pub const STAGE2_INIT: u64 = 5;
    pub const STAGE2_SHUFFLE: u64 = 6;
    pub const CAT_SELECT: u64 = 7;
    pub const SYNTHETIC: u64 = 8;
    pub const GRAD_CHECK: u64 = 9;
    pub const ORACLE: u64 = 10;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

pub fn normal_vec(rng: &mut Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| normal(rng, std)).collect()
}

pub fn uniform_vec(rng: &mut Rng, len: usize, bound: f64) -> Vec<f64> {
    use rand::Rng as _;
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}
