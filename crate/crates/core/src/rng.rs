//! Seeded randomness. Every random choice in the crate flows from an
//! explicit `u64` seed through these helpers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ir::Tensor;
use crate::scalar::Scalar;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed, e.g. one per layer or per sample.
pub fn child(seed: u64, tag: u64) -> u64 {
    let mut r = seeded(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.random()
}

pub fn gaussian<S: Scalar>(r: &mut Rng64, mean: f64, std: f64) -> S {
    let z: f64 = r.sample(StandardNormal);
    S::of(mean + std * z)
}

pub fn gaussian_vec<S: Scalar>(r: &mut Rng64, n: usize, mean: f64, std: f64) -> Vec<S> {
    (0..n).map(|_| gaussian(r, mean, std)).collect()
}

pub fn gaussian_tensor<S: Scalar>(r: &mut Rng64, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape, gaussian_vec(r, n, 0.0, std)).expect("length matches shape")
}

/// Log-uniform sample in `[lo, hi]`.
pub fn log_uniform(r: &mut Rng64, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        return lo;
    }
    (r.random_range(lo.ln()..=hi.ln())).exp()
}
