//! Analytic gradients of the losses with respect to the input embeddings,
//! the chain rule through row normalization, and a central-difference
//! checker.
//!
//! For the CS estimate with Gram means `A = Kxx`, `B = Kyy`, `C = Kxy` and
//! `dk(u, v)/du = -2 t (u - v) k(u, v)` (`t = 1 / (2 sigma^2)`):
//!
//! ```text
//! dD/dx_k = -4t / (M^2 A) sum_j (x_k - x_j) k(x_k, x_j)
//!           +4t / (M N C) sum_j (x_k - y_j) k(x_k, y_j)
//! ```
//!
//! and symmetrically for `y`. InfoNCE is differentiated through the cosine
//! table: with row softmax `P` and column softmax `Q` of `S / tau`,
//! `dL/dS_ij = (P_ij + Q_ij - 2 [i = j]) / (2 N tau)`.

use std::fmt;
use std::str::FromStr;

use crate::divergence::{check_token_batches, DivergenceValue, TokenBatch};
use crate::error::{Error, Result};
use crate::kernels::{kernel_table, self_kernel_table, table_mean, KernelParams};
use crate::losses::{check_paired, cosine_table, infonce_from_table, infonce_unchecked, pool, row_norms, LossConfig};
use crate::numerics::{dot, l2_normalize_rows, sample_gaussian, EmbeddingMatrix, GaussianSpec, RandomSource};

/// Gradients with respect to both inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub d_x: EmbeddingMatrix,
    pub d_y: EmbeddingMatrix,
}

/// Gradient of the combined objective with respect to raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGradient {
    pub paired: GradientPair,
    pub d_unpaired_x: Option<EmbeddingMatrix>,
    pub d_unpaired_y: Option<EmbeddingMatrix>,
}

/// Per-sample gradients of the token loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGradient {
    pub vision: Vec<EmbeddingMatrix>,
    pub text: Vec<EmbeddingMatrix>,
}

/// Location of a gradient entry: input matrix index, row, column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub matrix: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    /// `None` when every coordinate was skipped as negligible.
    pub worst_coordinate: Option<Coordinate>,
    pub step: f64,
}

/// Coordinates where both gradients are below this are not compared.
pub const SKIP_BELOW: f64 = 1e-8;
const REL_FLOOR: f64 = 1e-8;
pub const DEFAULT_STEP: f64 = 1e-5;

/// `sum_j (a_k - b_j) w(k, j)` for every row `k` of `a`, scaled by `coef`.
fn weighted_differences<W: Fn(usize, usize) -> f64>(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    weight: W,
    coef: f64,
    out: &mut EmbeddingMatrix,
) {
    let d = a.cols();
    let mut acc = vec![0.0; d];
    for k in 0..a.rows() {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let ak = a.row(k);
        for j in 0..b.rows() {
            let w = weight(k, j);
            if w == 0.0 {
                continue;
            }
            for ((s, &p), &q) in acc.iter_mut().zip(ak).zip(b.row(j)) {
                *s += (p - q) * w;
            }
        }
        for (o, s) in out.row_mut(k).iter_mut().zip(&acc) {
            *o += coef * s;
        }
    }
}

/// Value and gradient of the CS estimate, sharing one set of kernel tables.
/// The value is bitwise identical to [`crate::divergence::cs_divergence`].
pub fn cs_value_and_grad(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    params: KernelParams,
) -> Result<(DivergenceValue, Option<GradientPair>)> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySet);
    }
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            left: x.cols(),
            right: y.cols(),
        });
    }
    let rate = params.rate();
    let kxx = self_kernel_table(x, rate);
    let kyy = self_kernel_table(y, rate);
    let kxy = kernel_table(x, y, rate);
    let stats = crate::kernels::GramStats {
        mean_xx: table_mean(&kxx),
        mean_yy: table_mean(&kyy),
        mean_xy: table_mean(&kxy),
    };
    let value = stats.cs_divergence();
    if !value.is_finite() {
        return Ok((value, None));
    }
    let (m, n) = (x.rows(), y.rows());
    let cross_coef = 4.0 * rate / ((m * n) as f64 * stats.mean_xy);
    let side =
        |a: &EmbeddingMatrix, kaa: &[f64], mean_aa: f64, b: &EmbeddingMatrix, kab: &dyn Fn(usize, usize) -> f64| {
            let ma = a.rows();
            let mut out = EmbeddingMatrix::zeros(ma, a.cols());
            let self_coef = -4.0 * rate / ((ma * ma) as f64 * mean_aa);
            weighted_differences(
                a,
                a,
                |k, j| if k == j { 0.0 } else { kaa[k * ma + j] },
                self_coef,
                &mut out,
            );
            weighted_differences(a, b, kab, cross_coef, &mut out);
            out
        };
    let d_x = side(x, &kxx, stats.mean_xx, y, &|k, j| kxy[k * n + j]);
    let d_y = side(y, &kyy, stats.mean_yy, x, &|k, j| kxy[j * n + k]);
    Ok((value, Some(GradientPair { d_x, d_y })))
}

pub fn grad_cs(x: &EmbeddingMatrix, y: &EmbeddingMatrix, params: KernelParams) -> Result<GradientPair> {
    cs_value_and_grad(x, y, params)?.1.ok_or(Error::NonOverlapping)
}

/// Projects each upstream row onto the tangent space of the normalized raw
/// row and divides by the raw norm: `(I - u u^T) g / |v|`.
pub fn grad_normalize_chain(raw: &EmbeddingMatrix, upstream: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if raw.rows() != upstream.rows() || raw.cols() != upstream.cols() {
        return Err(Error::InvalidShape(format!(
            "upstream {}x{} for input {}x{}",
            upstream.rows(),
            upstream.cols(),
            raw.rows(),
            raw.cols()
        )));
    }
    let norms = row_norms(raw)?;
    let mut out = upstream.clone();
    for (r, &nv) in norms.iter().enumerate() {
        let v = raw.row(r);
        let g = out.row_mut(r);
        let radial = dot(v, g) / (nv * nv);
        for (gi, vi) in g.iter_mut().zip(v) {
            *gi = (*gi - radial * vi) / nv;
        }
    }
    Ok(out)
}

/// InfoNCE value and gradient with respect to the given rows; the loss uses
/// cosine similarity, so the gradient is tangential to each row.
pub(crate) fn infonce_value_and_grad(
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    tau: f64,
) -> Result<(f64, GradientPair)> {
    let n = x.rows();
    let sim = cosine_table(x, y)?;
    let value = infonce_from_table(&sim, n, tau);

    let mut dsim = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let mut probs = vec![0.0; n];
    for i in 0..n {
        softmax_into((0..n).map(|j| sim[i * n + j] / tau), &mut probs);
        for j in 0..n {
            dsim[i * n + j] += probs[j] * scale;
        }
    }
    for j in 0..n {
        softmax_into((0..n).map(|i| sim[i * n + j] / tau), &mut probs);
        for i in 0..n {
            dsim[i * n + j] += probs[i] * scale;
        }
    }
    for i in 0..n {
        dsim[i * n + i] -= 2.0 * scale;
    }

    let xn = l2_normalize_rows(x)?;
    let yn = l2_normalize_rows(y)?;
    let d = x.cols();
    let mut gx = EmbeddingMatrix::zeros(n, d);
    let mut gy = EmbeddingMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let w = dsim[i * n + j];
            for (g, v) in gx.row_mut(i).iter_mut().zip(yn.row(j)) {
                *g += w * v;
            }
            for (g, v) in gy.row_mut(j).iter_mut().zip(xn.row(i)) {
                *g += w * v;
            }
        }
    }
    Ok((
        value,
        GradientPair {
            d_x: grad_normalize_chain(x, &gx)?,
            d_y: grad_normalize_chain(y, &gy)?,
        },
    ))
}

fn softmax_into(logits: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Gradient of [`crate::losses::infonce`]. Inputs must have unit-norm rows.
pub fn grad_infonce(x: &EmbeddingMatrix, y: &EmbeddingMatrix, tau: f64) -> Result<GradientPair> {
    // Validates the same preconditions as the loss.
    crate::losses::infonce(x, y, tau)?;
    Ok(infonce_value_and_grad(x, y, tau)?.1)
}

/// Term weights of the objective `infonce * InfoNCE + cs * CS`. A `None`
/// weight leaves the term unevaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub infonce: Option<f64>,
    pub cs: Option<f64>,
}

/// Raw inputs of the objective; every set is normalized before the losses.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a> {
    pub x: &'a EmbeddingMatrix,
    pub y: &'a EmbeddingMatrix,
    pub unpaired_x: Option<&'a EmbeddingMatrix>,
    pub unpaired_y: Option<&'a EmbeddingMatrix>,
}

/// Unweighted term values plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub total: f64,
    pub infonce: Option<f64>,
    pub cs: Option<f64>,
}

fn present(m: Option<&EmbeddingMatrix>) -> Option<&EmbeddingMatrix> {
    m.filter(|m| !m.is_empty())
}

/// Value and raw-input gradient of a weighted InfoNCE + CS objective on the
/// normalized views. The CS term pools paired and unpaired rows per side.
pub fn weighted_objective(
    inputs: ObjectiveInputs<'_>,
    weights: ObjectiveWeights,
    cfg: &LossConfig,
) -> Result<(ObjectiveTerms, ObjectiveGradient)> {
    cfg.validate()?;
    let ObjectiveInputs { x, y, .. } = inputs;
    check_paired(x, y)?;
    let ux = present(inputs.unpaired_x);
    let uy = present(inputs.unpaired_y);
    let xn = l2_normalize_rows(x)?;
    let yn = l2_normalize_rows(y)?;

    let mut gx = EmbeddingMatrix::zeros(x.rows(), x.cols());
    let mut gy = EmbeddingMatrix::zeros(y.rows(), y.cols());
    let mut terms = ObjectiveTerms {
        total: 0.0,
        infonce: None,
        cs: None,
    };
    if let Some(w) = weights.infonce {
        let (v, g) = infonce_value_and_grad(&xn, &yn, cfg.tau)?;
        axpy(&mut gx, w, &g.d_x);
        axpy(&mut gy, w, &g.d_y);
        terms.infonce = Some(v);
        terms.total += w * v;
    }

    let mut d_unpaired_x = None;
    let mut d_unpaired_y = None;
    if let Some(w) = weights.cs {
        let uxn = ux.map(l2_normalize_rows).transpose()?;
        let uyn = uy.map(l2_normalize_rows).transpose()?;
        let pooled_x = pool(&xn, uxn.as_ref())?;
        let pooled_y = pool(&yn, uyn.as_ref())?;
        let (value, grad) = cs_value_and_grad(&pooled_x, &pooled_y, cfg.kernel()?)?;
        let cs = value.finite()?;
        let grad = grad.expect("finite divergence has a gradient");
        let (cs_x, cs_ux) = split_rows(&grad.d_x, x.rows());
        let (cs_y, cs_uy) = split_rows(&grad.d_y, y.rows());
        axpy(&mut gx, w, &cs_x);
        axpy(&mut gy, w, &cs_y);
        if let (Some(raw), Some(g)) = (ux, cs_ux) {
            d_unpaired_x = Some(grad_normalize_chain(raw, &scaled(&g, w))?);
        }
        if let (Some(raw), Some(g)) = (uy, cs_uy) {
            d_unpaired_y = Some(grad_normalize_chain(raw, &scaled(&g, w))?);
        }
        terms.cs = Some(cs);
        terms.total += w * cs;
    }

    Ok((
        terms,
        ObjectiveGradient {
            paired: GradientPair {
                d_x: grad_normalize_chain(x, &gx)?,
                d_y: grad_normalize_chain(y, &gy)?,
            },
            d_unpaired_x,
            d_unpaired_y,
        },
    ))
}

/// Gradient of `InfoNCE + lambda * CS` on normalized views, with respect to
/// the raw inputs.
pub fn grad_objective(
    x_raw: &EmbeddingMatrix,
    y_raw: &EmbeddingMatrix,
    cfg: &LossConfig,
    unpaired_x: Option<&EmbeddingMatrix>,
    unpaired_y: Option<&EmbeddingMatrix>,
) -> Result<ObjectiveGradient> {
    let inputs = ObjectiveInputs {
        x: x_raw,
        y: y_raw,
        unpaired_x,
        unpaired_y,
    };
    let weights = ObjectiveWeights {
        infonce: Some(1.0),
        cs: Some(cfg.lambda),
    };
    Ok(weighted_objective(inputs, weights, cfg)?.1)
}

/// Objective value on raw inputs (normalized internally).
pub fn objective_value(
    x_raw: &EmbeddingMatrix,
    y_raw: &EmbeddingMatrix,
    cfg: &LossConfig,
    unpaired_x: Option<&EmbeddingMatrix>,
    unpaired_y: Option<&EmbeddingMatrix>,
) -> Result<f64> {
    let normalize = |m: Option<&EmbeddingMatrix>| present(m).map(l2_normalize_rows).transpose();
    let report = crate::losses::cs_aligner_objective(
        &l2_normalize_rows(x_raw)?,
        &l2_normalize_rows(y_raw)?,
        cfg,
        normalize(unpaired_x)?.as_ref(),
        normalize(unpaired_y)?.as_ref(),
    )?;
    Ok(report.total)
}

/// Value and per-sample gradients of the token loss (inputs used as given).
pub fn token_value_and_grad(
    vision: &TokenBatch,
    text: &TokenBatch,
    params: KernelParams,
) -> Result<(f64, TokenGradient)> {
    check_token_batches(vision, text)?;
    let b = vision.len() as f64;
    let mut total = 0.0;
    let mut grad = TokenGradient {
        vision: Vec::with_capacity(vision.len()),
        text: Vec::with_capacity(text.len()),
    };
    for (i, (v, t)) in vision.samples().iter().zip(text.samples()).enumerate() {
        let (value, g) = cs_value_and_grad(v, t, params)?;
        let (DivergenceValue::Finite(d), Some(g)) = (value, g) else {
            return Err(Error::NonOverlappingTokens { sample: i });
        };
        total += d;
        grad.vision.push(scaled(&g.d_x, 1.0 / b));
        grad.text.push(scaled(&g.d_y, 1.0 / b));
    }
    Ok((total / b, grad))
}

pub fn grad_token_cs(vision: &TokenBatch, text: &TokenBatch, params: KernelParams) -> Result<TokenGradient> {
    Ok(token_value_and_grad(vision, text, params)?.1)
}

/// `acc += alpha * x`; a zero `alpha` leaves `acc` untouched.
pub(crate) fn axpy(acc: &mut EmbeddingMatrix, alpha: f64, x: &EmbeddingMatrix) {
    if alpha == 0.0 {
        return;
    }
    for (a, v) in acc.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *a += alpha * v;
    }
}

fn scaled(m: &EmbeddingMatrix, alpha: f64) -> EmbeddingMatrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
    out
}

fn split_rows(m: &EmbeddingMatrix, head: usize) -> (EmbeddingMatrix, Option<EmbeddingMatrix>) {
    let first = m.slice_rows(0, head);
    let rest = (m.rows() > head).then(|| m.slice_rows(head, m.rows()));
    (first, rest)
}

/// Compares `analytic` against central differences of `loss` at `inputs`.
pub fn check_gradient<F>(
    loss: F,
    inputs: &[EmbeddingMatrix],
    analytic: &[EmbeddingMatrix],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[EmbeddingMatrix]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidParameter(format!("step {h} outside [1e-7, 1e-3]")));
    }
    if inputs.len() != analytic.len() {
        return Err(Error::InvalidShape(format!(
            "{} gradients for {} inputs",
            analytic.len(),
            inputs.len()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: None,
        step: h,
    };
    let mut probe: Vec<EmbeddingMatrix> = inputs.to_vec();
    for (mi, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        if grad.rows() != input.rows() || grad.cols() != input.cols() {
            return Err(Error::InvalidShape(format!("gradient {mi} has the wrong shape")));
        }
        for idx in 0..input.as_slice().len() {
            let original = input.as_slice()[idx];
            probe[mi].as_mut_slice()[idx] = original + h;
            let plus = loss(&probe)?;
            probe[mi].as_mut_slice()[idx] = original - h;
            let minus = loss(&probe)?;
            probe[mi].as_mut_slice()[idx] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = grad.as_slice()[idx];
            if exact.abs() < SKIP_BELOW && numeric.abs() < SKIP_BELOW {
                continue;
            }
            let err = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            if report.worst_coordinate.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_coordinate = Some(Coordinate {
                    matrix: mi,
                    row: idx / input.cols(),
                    col: idx % input.cols(),
                });
            }
        }
    }
    Ok(report)
}

/// Loss selectable for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    Cs,
    Infonce,
    Objective,
    Token,
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(LossId::Cs),
            "infonce" => Ok(LossId::Infonce),
            "objective" => Ok(LossId::Objective),
            "token" => Ok(LossId::Token),
            other => Err(Error::InvalidParameter(format!(
                "unknown loss '{other}' (expected cs, infonce, objective or token)"
            ))),
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossId::Cs => "cs",
            LossId::Infonce => "infonce",
            LossId::Objective => "objective",
            LossId::Token => "token",
        })
    }
}

/// A loss together with the point at which to check its gradient.
#[derive(Debug, Clone)]
pub enum GradProblem {
    Cs {
        x: EmbeddingMatrix,
        y: EmbeddingMatrix,
        params: KernelParams,
    },
    Infonce {
        x: EmbeddingMatrix,
        y: EmbeddingMatrix,
        tau: f64,
    },
    Objective {
        x: EmbeddingMatrix,
        y: EmbeddingMatrix,
        cfg: LossConfig,
        unpaired_x: Option<EmbeddingMatrix>,
        unpaired_y: Option<EmbeddingMatrix>,
    },
    Token {
        vision: TokenBatch,
        text: TokenBatch,
        params: KernelParams,
    },
}

impl GradProblem {
    /// A seeded random instance with `n` rows (or tokens per sample) of width `dim`.
    pub fn random(loss: LossId, n: usize, dim: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::InvalidParameter("n and dim must be >= 1".into()));
        }
        let mut rng = RandomSource::new(seed);
        let spread = GaussianSpec::new(0.0, 0.7)?;
        let shifted = GaussianSpec::new(0.4, 0.7)?;
        let mut draw = |spec: &GaussianSpec, rows: usize| sample_gaussian(spec, rows, dim, &mut rng);
        Ok(match loss {
            LossId::Cs => GradProblem::Cs {
                x: draw(&spread, n)?,
                y: draw(&shifted, n)?,
                params: KernelParams::default(),
            },
            LossId::Infonce => GradProblem::Infonce {
                x: l2_normalize_rows(&draw(&spread, n)?)?,
                y: l2_normalize_rows(&draw(&shifted, n)?)?,
                tau: 0.07,
            },
            LossId::Objective => GradProblem::Objective {
                x: draw(&spread, n)?,
                y: draw(&shifted, n)?,
                cfg: LossConfig {
                    lambda: 0.5,
                    ..LossConfig::default()
                },
                unpaired_x: Some(draw(&spread, n / 2 + 1)?),
                unpaired_y: Some(draw(&shifted, n + 3)?),
            },
            LossId::Token => {
                let vision = vec![draw(&spread, n)?, draw(&spread, n / 2 + 1)?];
                let text = vec![draw(&shifted, n + 2)?, draw(&shifted, n / 3 + 1)?];
                GradProblem::Token {
                    vision: TokenBatch::new(vision)?,
                    text: TokenBatch::new(text)?,
                    params: KernelParams::default(),
                }
            }
        })
    }

    pub fn loss_id(&self) -> LossId {
        match self {
            GradProblem::Cs { .. } => LossId::Cs,
            GradProblem::Infonce { .. } => LossId::Infonce,
            GradProblem::Objective { .. } => LossId::Objective,
            GradProblem::Token { .. } => LossId::Token,
        }
    }

    /// The differentiable inputs, in the order gradients are reported.
    pub fn inputs(&self) -> Vec<EmbeddingMatrix> {
        match self {
            GradProblem::Cs { x, y, .. } | GradProblem::Infonce { x, y, .. } => vec![x.clone(), y.clone()],
            GradProblem::Objective {
                x,
                y,
                unpaired_x,
                unpaired_y,
                ..
            } => {
                let mut v = vec![x.clone(), y.clone()];
                v.extend(unpaired_x.iter().cloned());
                v.extend(unpaired_y.iter().cloned());
                v
            }
            GradProblem::Token { vision, text, .. } => vision.samples().iter().chain(text.samples()).cloned().collect(),
        }
    }

    /// Loss value at `inputs` (same layout as [`GradProblem::inputs`]).
    pub fn value_at(&self, inputs: &[EmbeddingMatrix]) -> Result<f64> {
        match self {
            GradProblem::Cs { params, .. } => {
                crate::divergence::cs_divergence(&inputs[0], &inputs[1], *params)?.finite()
            }
            GradProblem::Infonce { tau, .. } => infonce_unchecked(&inputs[0], &inputs[1], *tau),
            GradProblem::Objective {
                cfg,
                unpaired_x,
                unpaired_y,
                ..
            } => {
                let (ux, uy) = unpaired_slots(unpaired_x.is_some(), unpaired_y.is_some(), inputs);
                objective_value(&inputs[0], &inputs[1], cfg, ux, uy)
            }
            GradProblem::Token { vision, params, .. } => {
                let b = vision.len();
                let v = TokenBatch::new(inputs[..b].to_vec())?;
                let t = TokenBatch::new(inputs[b..].to_vec())?;
                crate::divergence::token_cs_loss(&v, &t, *params)
            }
        }
    }

    /// Analytic gradient at the stored point (same layout as [`GradProblem::inputs`]).
    pub fn analytic_gradient(&self) -> Result<Vec<EmbeddingMatrix>> {
        Ok(match self {
            GradProblem::Cs { x, y, params } => {
                let g = grad_cs(x, y, *params)?;
                vec![g.d_x, g.d_y]
            }
            GradProblem::Infonce { x, y, tau } => {
                let g = grad_infonce(x, y, *tau)?;
                vec![g.d_x, g.d_y]
            }
            GradProblem::Objective {
                x,
                y,
                cfg,
                unpaired_x,
                unpaired_y,
            } => {
                let g = grad_objective(x, y, cfg, unpaired_x.as_ref(), unpaired_y.as_ref())?;
                let mut v = vec![g.paired.d_x, g.paired.d_y];
                v.extend(g.d_unpaired_x);
                v.extend(g.d_unpaired_y);
                v
            }
            GradProblem::Token { vision, text, params } => {
                let g = grad_token_cs(vision, text, *params)?;
                g.vision.into_iter().chain(g.text).collect()
            }
        })
    }
}

fn unpaired_slots(
    has_x: bool,
    has_y: bool,
    inputs: &[EmbeddingMatrix],
) -> (Option<&EmbeddingMatrix>, Option<&EmbeddingMatrix>) {
    let mut rest = inputs[2..].iter();
    let ux = if has_x { rest.next() } else { None };
    let uy = if has_y { rest.next() } else { None };
    (ux, uy)
}

/// Central-difference check of the problem's analytic gradient.
pub fn finite_difference_check(problem: &GradProblem, h: f64) -> Result<GradCheckReport> {
    let inputs = problem.inputs();
    let analytic = problem.analytic_gradient()?;
    check_gradient(|p| problem.value_at(p), &inputs, &analytic, h)
}
