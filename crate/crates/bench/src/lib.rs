//! Fixtures shared by the benchmarks.

use csalign_core::numerics::sample_gaussian;
use csalign_core::{l2_normalize_rows, EmbeddingMatrix, GaussianSpec, RandomSource};

/// A seeded pair of `n x dim` Gaussian sample sets offset by `shift`.
pub fn gaussian_pair(n: usize, dim: usize, shift: f64, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let mut rng = RandomSource::new(seed);
    let x = sample_gaussian(&GaussianSpec { mean: 0.0, std: 1.0 }, n, dim, &mut rng).expect("valid sizes");
    let y = sample_gaussian(&GaussianSpec { mean: shift, std: 1.0 }, n, dim, &mut rng).expect("valid sizes");
    (x, y)
}

/// As [`gaussian_pair`] with unit-norm rows.
pub fn unit_pair(n: usize, dim: usize, seed: u64) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let (x, y) = gaussian_pair(n, dim, 0.5, seed);
    (
        l2_normalize_rows(&x).expect("nonzero rows"),
        l2_normalize_rows(&y).expect("nonzero rows"),
    )
}
