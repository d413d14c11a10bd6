//! Gaussian kernel and the mean-Gram statistics behind the CS estimator.
//!
//! All Gram means are accumulated with [`ExactSum`], so the reported means
//! are the correctly rounded averages of the individual kernel values. They
//! do not depend on summation order, which makes `mean_xy` exactly symmetric
//! under swapping the two sample sets and invariant under row permutations.

use crate::error::{Error, Result};
use crate::exact_sum::ExactSum;
use crate::numerics::{check_dims, sq_dist, EmbeddingMatrix};

/// Width of the Gaussian kernel `exp(-|u - v|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    sigma: f64,
}

impl Default for KernelParams {
    /// Width 1, intended for L2-normalized inputs.
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl KernelParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "kernel width must be > 0, got {sigma}"
            )));
        }
        Ok(Self { sigma })
    }

    /// The width whose kernel is `exp(-t |u - v|^2)`.
    pub fn from_rate(t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("kernel rate must be > 0, got {t}")));
        }
        Self::new(1.0 / (2.0 * t).sqrt())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// `1 / (2 sigma^2)`.
    pub fn rate(&self) -> f64 {
        1.0 / (2.0 * self.sigma * self.sigma)
    }
}

/// Mean kernel values within and across the two sample sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramStats {
    pub mean_xx: f64,
    pub mean_yy: f64,
    pub mean_xy: f64,
}

pub fn gaussian_kernel(u: &[f64], v: &[f64], params: KernelParams) -> Result<f64> {
    check_dims(u.len(), v.len())?;
    Ok(kernel_at_rate(sq_dist(u, v), params.rate()))
}

#[inline]
pub(crate) fn kernel_at_rate(sq_distance: f64, rate: f64) -> f64 {
    (-rate * sq_distance).exp()
}

fn check_pair(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    check_dims(x.cols(), y.cols())
}

/// Mean of `exp(-rate |a_i - b_j|^2)` over all `(i, j)`.
pub(crate) fn mean_kernel_at_rate(a: &EmbeddingMatrix, b: &EmbeddingMatrix, rate: f64) -> f64 {
    let mut acc = ExactSum::new();
    for ai in a.iter_rows() {
        for bj in b.iter_rows() {
            acc.add(kernel_at_rate(sq_dist(ai, bj), rate));
        }
    }
    acc.value() / (a.rows() as f64 * b.rows() as f64)
}

/// Mean of `exp(-rate |a_i - a_j|^2)` over all ordered pairs, self-pairs
/// included. Only the upper triangle is evaluated.
pub(crate) fn self_mean_kernel_at_rate(a: &EmbeddingMatrix, rate: f64) -> f64 {
    let mut acc = ExactSum::new();
    let n = a.rows();
    for i in 0..n {
        acc.add(1.0);
        let ai = a.row(i);
        for j in (i + 1)..n {
            let k = kernel_at_rate(sq_dist(ai, a.row(j)), rate);
            acc.add(k);
            acc.add(k);
        }
    }
    acc.value() / (n as f64 * n as f64)
}

/// Kernel values `exp(-rate |a_i - b_j|^2)` as a row-major `a.rows() x b.rows()` table.
pub(crate) fn kernel_table(a: &EmbeddingMatrix, b: &EmbeddingMatrix, rate: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for ai in a.iter_rows() {
        out.extend(b.iter_rows().map(|bj| kernel_at_rate(sq_dist(ai, bj), rate)));
    }
    out
}

/// Symmetric self-kernel table of `a`, with exact ones on the diagonal.
pub(crate) fn self_kernel_table(a: &EmbeddingMatrix, rate: f64) -> Vec<f64> {
    let n = a.rows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let k = kernel_at_rate(sq_dist(a.row(i), a.row(j)), rate);
            out[i * n + j] = k;
            out[j * n + i] = k;
        }
    }
    out
}

/// Mean of a kernel table with the same rounding as the on-the-fly means.
pub(crate) fn table_mean(table: &[f64]) -> f64 {
    let mut acc = ExactSum::new();
    acc.extend(table.iter().copied());
    acc.value() / table.len() as f64
}

pub fn gram_stats(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: KernelParams) -> Result<GramStats> {
    check_pair(x, y)?;
    let rate = params.rate();
    Ok(GramStats {
        mean_xx: self_mean_kernel_at_rate(x, rate),
        mean_yy: self_mean_kernel_at_rate(y, rate),
        mean_xy: mean_kernel_at_rate(x, y, rate),
    })
}
