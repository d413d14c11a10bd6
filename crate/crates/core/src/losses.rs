//! InfoNCE, alignment/uniformity terms and the combined objective.
//!
//! Loss functions take already normalized embeddings; normalizing is the
//! caller's job (the trainer composes normalize-then-loss). Two uniformity
//! rates appear in practice: `t = 1 / (2 sigma^2)` ties the uniformity
//! terms to the CS kernel, while InfoNCE's own decomposition on the unit
//! sphere uses `t = 1 / (2 tau)`. Both are available via [`LossConfig`].

use crate::divergence::DivergenceValue;
use crate::error::{Error, Result};
use crate::kernels::{gram_stats, mean_kernel_at_rate, self_mean_kernel_at_rate, KernelParams};
use crate::numerics::{dot, norm, sq_dist, EmbeddingMatrix};

/// Allowed deviation from unit norm for loss inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the CS divergence term.
    pub lambda: f64,
    /// Exponent of the pairwise alignment distance.
    pub alpha: f64,
    /// Kernel width of the CS term.
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 0.01,
            alpha: 2.0,
            sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, v: f64| Err(Error::InvalidParameter(format!("{name} = {v}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", self.tau);
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha", self.alpha);
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", self.sigma);
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<KernelParams> {
        KernelParams::new(self.sigma)
    }

    /// Uniformity rate matching the CS kernel, `1 / (2 sigma^2)`.
    pub fn kernel_rate(&self) -> f64 {
        1.0 / (2.0 * self.sigma * self.sigma)
    }

    /// Uniformity rate of InfoNCE's decomposition on the unit sphere, `1 / (2 tau)`.
    pub fn temperature_rate(&self) -> f64 {
        1.0 / (2.0 * self.tau)
    }
}

/// Decomposed loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Absent for losses that do not involve InfoNCE.
    pub infonce: Option<f64>,
    pub cs: f64,
    pub alignment: f64,
    pub uniformity_x: f64,
    pub uniformity_y: f64,
    pub cross_uniformity: f64,
    pub token: Option<f64>,
}

pub(crate) fn check_paired(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::PairCountMismatch {
            left: x.rows(),
            right: y.rows(),
        });
    }
    if x.rows() == 0 {
        return Err(Error::EmptySet);
    }
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            left: x.cols(),
            right: y.cols(),
        });
    }
    Ok(())
}

fn check_sets(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            left: x.cols(),
            right: y.cols(),
        });
    }
    Ok(())
}

fn check_unit_rows(m: &EmbeddingMatrix) -> Result<()> {
    for (row, r) in m.iter_rows().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotNormalized { row, norm: n });
        }
    }
    Ok(())
}

fn check_rate(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("uniformity rate t = {t}")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cosine similarity table `S[i][j] = cos(x_i, y_j)`, row-major.
pub(crate) fn cosine_table(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let nx = row_norms(x)?;
    let ny = row_norms(y)?;
    let mut s = Vec::with_capacity(x.rows() * y.rows());
    for (i, xi) in x.iter_rows().enumerate() {
        for (j, yj) in y.iter_rows().enumerate() {
            s.push(dot(xi, yj) / (nx[i] * ny[j]));
        }
    }
    Ok(s)
}

pub(crate) fn row_norms(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(row, r)| {
            let n = norm(r);
            if n > crate::numerics::NORM_EPS {
                Ok(n)
            } else {
                Err(Error::ZeroNormRow { row })
            }
        })
        .collect()
}

/// InfoNCE from a cosine table: mean of the image-to-text and text-to-image
/// cross-entropies of the matched pairs.
pub(crate) fn infonce_from_table(sim: &[f64], n: usize, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = (0..n).map(|j| sim[i * n + j] / tau);
        let col = (0..n).map(|j| sim[j * n + i] / tau);
        let positive = sim[i * n + i] / tau;
        total += (positive - log_sum_exp(row)) + (positive - log_sum_exp(col));
    }
    -total / (2.0 * n as f64)
}

/// Symmetric InfoNCE with cosine similarity and temperature `tau`.
/// Both inputs must have unit-norm rows.
pub fn infonce(x: &EmbeddingMatrix, y: &EmbeddingMatrix, tau: f64) -> Result<f64> {
    check_paired(x, y)?;
    check_unit_rows(x)?;
    check_unit_rows(y)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau = {tau}")));
    }
    infonce_unchecked(x, y, tau)
}

/// InfoNCE without the unit-norm precondition; the cosine makes the value
/// scale-free in each row.
pub(crate) fn infonce_unchecked(x: &EmbeddingMatrix, y: &EmbeddingMatrix, tau: f64) -> Result<f64> {
    let sim = cosine_table(x, y)?;
    Ok(infonce_from_table(&sim, x.rows(), tau))
}

/// Mean of `|x_i - y_i|^alpha` over pairs.
pub fn alignment_term(x: &EmbeddingMatrix, y: &EmbeddingMatrix, alpha: f64) -> Result<f64> {
    check_paired(x, y)?;
    let total: f64 = x
        .iter_rows()
        .zip(y.iter_rows())
        .map(|(a, b)| sq_dist(a, b).powf(alpha / 2.0))
        .sum();
    Ok(total / x.rows() as f64)
}

/// `log mean_{i,j} exp(-t |x_i - y_j|^2)` over all cross pairs.
pub fn uniformity_term(x: &EmbeddingMatrix, y: &EmbeddingMatrix, t: f64) -> Result<f64> {
    check_sets(x, y)?;
    check_rate(t)?;
    Ok(mean_kernel_at_rate(x, y, t).ln())
}

/// `log mean_{i,j} exp(-t |z_i - z_j|^2)` within one set, self-pairs included.
pub fn self_uniformity(z: &EmbeddingMatrix, t: f64) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptySet);
    }
    check_rate(t)?;
    Ok(self_mean_kernel_at_rate(z, t).ln())
}

/// First-order expansion of [`uniformity_term`]: `-t mean |x_i - y_j|^2`.
pub fn uniformity_taylor(x: &EmbeddingMatrix, y: &EmbeddingMatrix, t: f64) -> Result<f64> {
    check_sets(x, y)?;
    check_rate(t)?;
    let mut total = 0.0;
    for a in x.iter_rows() {
        for b in y.iter_rows() {
            total += sq_dist(a, b);
        }
    }
    Ok(-t * total / (x.rows() * y.rows()) as f64)
}

/// `infonce + lambda * cs`, where the CS term sees the paired rows together
/// with any unpaired rows of the same modality.
pub fn cs_aligner_objective(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    cfg: &LossConfig,
    unpaired_x: Option<&EmbeddingMatrix>,
    unpaired_y: Option<&EmbeddingMatrix>,
) -> Result<LossReport> {
    cfg.validate()?;
    let info = infonce(x, y, cfg.tau)?;
    let pooled_x = pool(x, unpaired_x)?;
    let pooled_y = pool(y, unpaired_y)?;
    let stats = gram_stats(&pooled_x, &pooled_y, cfg.kernel()?)?;
    let cs = match stats.cs_divergence() {
        DivergenceValue::Finite(v) => v,
        DivergenceValue::NonOverlapping => return Err(Error::NonOverlapping),
    };
    Ok(LossReport {
        total: info + cfg.lambda * cs,
        infonce: Some(info),
        cs,
        alignment: alignment_term(x, y, cfg.alpha)?,
        uniformity_x: stats.mean_xx.ln(),
        uniformity_y: stats.mean_yy.ln(),
        cross_uniformity: stats.mean_xy.ln(),
        token: None,
    })
}

pub(crate) fn pool(paired: &EmbeddingMatrix, extra: Option<&EmbeddingMatrix>) -> Result<EmbeddingMatrix> {
    match extra {
        Some(e) if !e.is_empty() => EmbeddingMatrix::vstack(&[paired, e]),
        Some(e) if e.cols() != paired.cols() => Err(Error::DimensionMismatch {
            left: paired.cols(),
            right: e.cols(),
        }),
        _ => Ok(paired.clone()),
    }
}

/// Alignment minus cross-uniformity plus both self-uniformities: the
/// objective `align + cross + 1 * CS` regrouped term by term.
pub fn decomposed_objective(x: &EmbeddingMatrix, y: &EmbeddingMatrix, t: f64, alpha: f64) -> Result<LossReport> {
    check_paired(x, y)?;
    let alignment = alignment_term(x, y, alpha)?;
    let cross = uniformity_term(x, y, t)?;
    let ux = self_uniformity(x, t)?;
    let uy = self_uniformity(y, t)?;
    Ok(LossReport {
        total: alignment - cross + ux + uy,
        infonce: None,
        cs: ux + uy - 2.0 * cross,
        alignment,
        uniformity_x: ux,
        uniformity_y: uy,
        cross_uniformity: cross,
        token: None,
    })
}

/// Mean squared distance between paired rows.
pub fn prior_l2(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<f64> {
    check_paired(x, y)?;
    let total: f64 = x.iter_rows().zip(y.iter_rows()).map(|(a, b)| sq_dist(a, b)).sum();
    Ok(total / x.rows() as f64)
}
