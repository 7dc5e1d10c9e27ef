//! Synthetic inputs shared by the benchmarks.

use ifpca_core::rng::job_rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

/// `n x p` standard normal entries.
pub fn gaussian(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = job_rng(seed);
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng))
}

/// Gaussian noise with the second half of the rows shifted by `shift` in the first `strong` columns.
pub fn planted(n: usize, p: usize, strong: usize, shift: f64, seed: u64) -> DMatrix<f64> {
    let mut x = gaussian(n, p, seed);
    for j in 0..strong.min(p) {
        for i in n / 2..n {
            x[(i, j)] += shift;
        }
    }
    x
}
