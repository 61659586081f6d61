//! Seeded random streams.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `label` under `seed`; stable across runs and platforms.
pub fn derived_rng(seed: u64, label: &str) -> SeededRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&d);
    ChaCha8Rng::from_seed(key)
}

pub fn derived_seed(seed: u64, label: &str) -> u64 {
    derived_rng(seed, label).random()
}

pub fn normal_array<T: Scalar>(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(rng.sample::<f64, _>(StandardNormal)))
}

pub fn uniform_array<T: Scalar>(rng: &mut SeededRng, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(rng.random_range(-bound..bound)))
}
