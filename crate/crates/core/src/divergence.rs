//! Kernel-density Cauchy–Schwarz divergence between two sample sets.
//!
//! With Gram means `Kxx`, `Kyy`, `Kxy` the estimate is
//!
//! ```text
//! D = log Kxx + log Kyy - 2 log Kxy = -2 log( Kxy / sqrt(Kxx Kyy) )
//! ```
//!
//! i.e. minus twice the log cosine between the two kernel mean embeddings.
//! Self-pairs are included in `Kxx` and `Kyy` (a V-statistic), so the
//! estimate of two identical sample sets is exactly zero.

use crate::error::{Error, Result};
use crate::kernels::{gram_stats, GramStats, KernelParams};
use crate::numerics::EmbeddingMatrix;

/// Result of the estimator: either a finite value or the non-overlap
/// marker, produced when every cross-set kernel value underflows to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceValue {
    Finite(f64),
    NonOverlapping,
}

impl DivergenceValue {
    pub fn value(self) -> Option<f64> {
        match self {
            DivergenceValue::Finite(v) => Some(v),
            DivergenceValue::NonOverlapping => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, DivergenceValue::Finite(_))
    }

    /// The finite value, or [`Error::NonOverlapping`].
    pub fn finite(self) -> Result<f64> {
        self.value().ok_or(Error::NonOverlapping)
    }
}

impl GramStats {
    pub fn cs_divergence(&self) -> DivergenceValue {
        if self.mean_xy == 0.0 {
            return DivergenceValue::NonOverlapping;
        }
        DivergenceValue::Finite(self.mean_xx.ln() + self.mean_yy.ln() - 2.0 * self.mean_xy.ln())
    }

    /// Cosine between the two RKHS mean embeddings.
    pub fn embedding_cosine(&self) -> f64 {
        self.mean_xy / (self.mean_xx * self.mean_yy).sqrt()
    }

    pub fn cs_divergence_rkhs(&self) -> DivergenceValue {
        if self.mean_xy == 0.0 {
            return DivergenceValue::NonOverlapping;
        }
        DivergenceValue::Finite(-2.0 * self.embedding_cosine().ln())
    }
}

pub fn cs_divergence(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: KernelParams) -> Result<DivergenceValue> {
    Ok(gram_stats(x, y, params)?.cs_divergence())
}

/// The same estimate computed as `-2 log cos(mu_x, mu_y)` in the kernel's
/// feature space.
pub fn cs_divergence_rkhs(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: KernelParams) -> Result<DivergenceValue> {
    Ok(gram_stats(x, y, params)?.cs_divergence_rkhs())
}

/// Ragged batch of per-sample token sets sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    samples: Vec<EmbeddingMatrix>,
}

impl TokenBatch {
    pub fn new(samples: Vec<EmbeddingMatrix>) -> Result<Self> {
        let dim = samples.first().map(|s| s.cols()).ok_or(Error::EmptySet)?;
        for s in &samples {
            if s.is_empty() {
                return Err(Error::EmptySet);
            }
            if s.cols() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: s.cols(),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].cols()
    }

    pub fn samples(&self) -> &[EmbeddingMatrix] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &EmbeddingMatrix {
        &self.samples[i]
    }

    pub fn into_samples(self) -> Vec<EmbeddingMatrix> {
        self.samples
    }

    /// Samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn map_samples<F>(&self, f: F) -> Result<Self>
    where
        F: FnMut(&EmbeddingMatrix) -> Result<EmbeddingMatrix>,
    {
        Self::new(self.samples.iter().map(f).collect::<Result<Vec<_>>>()?)
    }
}

pub(crate) fn check_token_batches(vision: &TokenBatch, text: &TokenBatch) -> Result<()> {
    if vision.len() != text.len() {
        return Err(Error::BatchSizeMismatch {
            left: vision.len(),
            right: text.len(),
        });
    }
    if vision.dim() != text.dim() {
        return Err(Error::DimensionMismatch {
            left: vision.dim(),
            right: text.dim(),
        });
    }
    Ok(())
}

/// Mean over the batch of the divergence between each sample's vision and
/// text token sets.
pub fn token_cs_loss(vision: &TokenBatch, text: &TokenBatch, params: KernelParams) -> Result<f64> {
    check_token_batches(vision, text)?;
    let mut total = 0.0;
    for (i, (v, t)) in vision.samples().iter().zip(text.samples()).enumerate() {
        match cs_divergence(v, t, params)? {
            DivergenceValue::Finite(d) => total += d,
            DivergenceValue::NonOverlapping => return Err(Error::NonOverlappingTokens { sample: i }),
        }
    }
    Ok(total / vision.len() as f64)
}
