//! Shared helpers for the integration tests. Oracles (brute-force reference
//! implementations) live in the test files that use them and deliberately
//! avoid the library's kernels.

use loupe_core::rng::{self, StreamKind};
use rand_chacha::ChaCha8Rng;

pub fn test_rng(case: u64) -> ChaCha8Rng {
    rng::stream(0xC0FFEE, StreamKind::Test, case)
}

/// Uniform values in [-1, 1).
pub fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng::uniform(rng) * 2.0 - 1.0).collect()
}

/// Uniform values in (lo, hi).
pub fn random_vec_in(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len)
        .map(|_| lo + rng::uniform(rng) * (hi - lo))
        .collect()
}

pub fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    lo + rng::below(rng, hi - lo + 1)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
