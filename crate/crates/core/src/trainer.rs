//! Dense adapters trained with Adam under the alignment loss regimes, plus
//! retrieval evaluation and a λ × σ sweep.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::{MultiCaptionDataset, PairedDataset, UnpairedPool};
use crate::divergence::{cs_divergence, TokenBatch};
use crate::error::{Error, Result};
use crate::gradients::{
    grad_normalize_chain, token_value_and_grad, weighted_objective, ObjectiveInputs, ObjectiveWeights,
};
use crate::kernels::KernelParams;
use crate::losses::LossConfig;
use crate::numerics::{cosine_sim, fmt_shortest, l2_normalize_rows, norm, EmbeddingMatrix, RandomSource};

// Each shuffle has its own stream so extras never perturb the paired order.
const SHUFFLE_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const POOL_X_STREAM: u64 = 2;
const POOL_Y_STREAM: u64 = 3;
const TOKEN_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    InfonceOnly,
    CsOnly,
    Combined,
    CombinedUnpaired,
    CombinedMulticaption,
    CombinedToken,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::InfonceOnly,
        Regime::CsOnly,
        Regime::Combined,
        Regime::CombinedUnpaired,
        Regime::CombinedMulticaption,
        Regime::CombinedToken,
    ];

    pub fn uses_infonce(self) -> bool {
        self != Regime::CsOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::InfonceOnly => "infonce_only",
            Regime::CsOnly => "cs_only",
            Regime::Combined => "combined",
            Regime::CombinedUnpaired => "combined_unpaired",
            Regime::CombinedMulticaption => "combined_multicaption",
            Regime::CombinedToken => "combined_token",
        }
    }

    fn weights(self, lambda: f64) -> ObjectiveWeights {
        match self {
            Regime::InfonceOnly => ObjectiveWeights {
                infonce: Some(1.0),
                cs: None,
            },
            Regime::CsOnly => ObjectiveWeights {
                infonce: None,
                cs: Some(1.0),
            },
            _ => ObjectiveWeights {
                infonce: Some(1.0),
                cs: Some(lambda),
            },
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown regime '{s}'")))
    }
}

/// Which modality passes through a trainable adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptSide {
    X,
    #[default]
    Y,
    Both,
}

impl AdaptSide {
    fn adapts_x(self) -> bool {
        matches!(self, AdaptSide::X | AdaptSide::Both)
    }

    fn adapts_y(self) -> bool {
        matches!(self, AdaptSide::Y | AdaptSide::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Linear,
    TwoLayer {
        hidden: usize,
    },
}

/// One affine layer `out = W u + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: EmbeddingMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn new(weights: EmbeddingMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                left: weights.rows(),
                right: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("bias entries must be finite".into()));
        }
        Ok(Self { weights, bias })
    }

    fn random(input: usize, output: usize, rng: &mut RandomSource) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let data = (0..input * output).map(|_| rng.normal(0.0, std)).collect();
        Self {
            weights: EmbeddingMatrix::from_raw(output, input, data),
            bias: vec![0.0; output],
        }
    }

    fn apply(&self, m: &EmbeddingMatrix) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(m.rows(), self.weights.rows());
        for r in 0..m.rows() {
            let u = m.row(r);
            for (o, (w, b)) in out.row_mut(r).iter_mut().zip(self.weights.iter_rows().zip(&self.bias)) {
                *o = b + w.iter().zip(u).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        out
    }

    fn len(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// Accumulates `dW += g^T u`, `db += sum g` into `grad` (weights then bias).
    fn accumulate(&self, input: &EmbeddingMatrix, upstream: &EmbeddingMatrix, grad: &mut [f64]) {
        let (gw, gb) = grad.split_at_mut(self.weights.as_slice().len());
        let cols = self.weights.cols();
        for r in 0..input.rows() {
            let u = input.row(r);
            for (o, &g) in upstream.row(r).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (w, &v) in gw[o * cols..(o + 1) * cols].iter_mut().zip(u) {
                    *w += g * v;
                }
            }
        }
    }

    /// `W^T g` for every row of `upstream`.
    fn back_input(&self, upstream: &EmbeddingMatrix) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(upstream.rows(), self.weights.cols());
        for r in 0..upstream.rows() {
            let o = out.row_mut(r);
            for (g, w) in upstream.row(r).iter().zip(self.weights.iter_rows()) {
                for (a, &v) in o.iter_mut().zip(w) {
                    *a += g * v;
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

/// A linear map or a two-layer tanh network. Outputs are not normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    kind: AdapterKind,
    layers: Vec<DenseLayer>,
}

impl AdapterParams {
    pub fn identity(dim: usize) -> Self {
        let mut w = EmbeddingMatrix::zeros(dim, dim);
        for i in 0..dim {
            w.row_mut(i)[i] = 1.0;
        }
        Self {
            kind: AdapterKind::Linear,
            layers: vec![DenseLayer {
                weights: w,
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn linear(weights: EmbeddingMatrix, bias: Vec<f64>) -> Result<Self> {
        Ok(Self {
            kind: AdapterKind::Linear,
            layers: vec![DenseLayer::new(weights, bias)?],
        })
    }

    pub fn two_layer(w1: EmbeddingMatrix, b1: Vec<f64>, w2: EmbeddingMatrix, b2: Vec<f64>) -> Result<Self> {
        if w2.cols() != w1.rows() {
            return Err(Error::DimensionMismatch {
                left: w1.rows(),
                right: w2.cols(),
            });
        }
        Ok(Self {
            kind: AdapterKind::TwoLayer { hidden: w1.rows() },
            layers: vec![DenseLayer::new(w1, b1)?, DenseLayer::new(w2, b2)?],
        })
    }

    /// Linear adapters of matching width start at the identity; everything
    /// else gets `N(0, 1/fan_in)` weights and zero biases.
    pub fn init(kind: AdapterKind, input: usize, output: usize, rng: &mut RandomSource) -> Result<Self> {
        if input == 0 || output == 0 {
            return Err(Error::InvalidParameter("adapter dims must be >= 1".into()));
        }
        Ok(match kind {
            AdapterKind::Linear if input == output => Self::identity(input),
            AdapterKind::Linear => Self {
                kind,
                layers: vec![DenseLayer::random(input, output, rng)],
            },
            AdapterKind::TwoLayer { hidden } => {
                if hidden == 0 {
                    return Err(Error::InvalidParameter("hidden width must be >= 1".into()));
                }
                Self {
                    kind,
                    layers: vec![
                        DenseLayer::random(input, hidden, rng),
                        DenseLayer::random(hidden, output, rng),
                    ],
                }
            }
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(DenseLayer::params_mut)
    }

    fn forward_traced(&self, m: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, Trace)> {
        if m.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                left: self.input_dim(),
                right: m.cols(),
            });
        }
        match self.layers.as_slice() {
            [only] => Ok((
                only.apply(m),
                Trace {
                    input: m.clone(),
                    hidden: None,
                },
            )),
            [first, second] => {
                let mut h = first.apply(m);
                h.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
                let out = second.apply(&h);
                Ok((
                    out,
                    Trace {
                        input: m.clone(),
                        hidden: Some(h),
                    },
                ))
            }
            _ => unreachable!("adapters have one or two layers"),
        }
    }

    /// Accumulates the parameter gradient for `upstream = dL/d(output)`.
    fn backward(&self, trace: &Trace, upstream: &EmbeddingMatrix, grad: &mut [f64]) {
        match (self.layers.as_slice(), &trace.hidden) {
            ([only], None) => only.accumulate(&trace.input, upstream, grad),
            ([first, second], Some(h)) => {
                let (g1, g2) = grad.split_at_mut(first.len());
                second.accumulate(h, upstream, g2);
                let mut dh = second.back_input(upstream);
                for (d, &hv) in dh.as_mut_slice().iter_mut().zip(h.as_slice()) {
                    *d *= 1.0 - hv * hv;
                }
                first.accumulate(&trace.input, &dh, g1);
            }
            _ => unreachable!("trace matches adapter depth"),
        }
    }
}

struct Trace {
    input: EmbeddingMatrix,
    hidden: Option<EmbeddingMatrix>,
}

pub fn adapter_forward(params: &AdapterParams, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    Ok(params.forward_traced(m)?.0)
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut AdapterParams, grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in params.params_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    pub adapt_side: AdaptSide,
    pub seed: u64,
    pub eval_fraction: f64,
    pub adapter: AdapterKind,
    /// Weight of the token loss in the `combined_token` regime.
    pub token_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Combined,
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-2,
            loss: LossConfig::default(),
            adapt_side: AdaptSide::Y,
            seed: 0,
            eval_fraction: 0.2,
            adapter: AdapterKind::Linear,
            token_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        let min_batch = if self.regime.uses_infonce() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidParameter(format!(
                "batch_size must be >= {min_batch} for regime {}",
                self.regime
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 0.5) {
            return Err(Error::InvalidParameter(format!(
                "eval_fraction must be in (0, 0.5], got {}",
                self.eval_fraction
            )));
        }
        if !(self.token_weight.is_finite() && self.token_weight >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "token_weight must be >= 0, got {}",
                self.token_weight
            )));
        }
        Ok(())
    }

    /// Number of held-out pairs for `n` pairs: `ceil(eval_fraction * n)`.
    pub fn eval_count(&self, n: usize) -> usize {
        (self.eval_fraction * n as f64).ceil() as usize
    }
}

/// Extra training data required by some regimes.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TrainExtras {
    #[default]
    None,
    Unpaired(UnpairedPool),
    MultiCaption(MultiCaptionDataset),
    Tokens {
        vision: TokenBatch,
        text: TokenBatch,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_infonce: Option<f64>,
    pub loss_cs: Option<f64>,
    pub loss_token: Option<f64>,
    pub eval_cs_divergence: f64,
    /// Mean of image-to-text and text-to-image recall.
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_embedding_gap: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_total,loss_infonce,loss_cs,loss_token,eval_cs_divergence,recall_at_1,recall_at_5,mean_embedding_gap";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_shortest).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            fmt_shortest(self.loss_total),
            opt(self.loss_infonce),
            opt(self.loss_cs),
            opt(self.loss_token),
            fmt_shortest(self.eval_cs_divergence),
            fmt_shortest(self.recall_at_1),
            fmt_shortest(self.recall_at_5),
            fmt_shortest(self.mean_embedding_gap),
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(MetricsRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Trained adapters; an unadapted side is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    pub x: Option<AdapterParams>,
    pub y: Option<AdapterParams>,
}

impl Adapters {
    pub fn apply_x(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        apply(self.x.as_ref(), m)
    }

    pub fn apply_y(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        apply(self.y.as_ref(), m)
    }
}

fn apply(params: Option<&AdapterParams>, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    match params {
        Some(p) => adapter_forward(p, m),
        None => Ok(m.clone()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapters: Adapters,
    pub metrics: Vec<MetricsRow>,
}

/// Recall@k in both directions on paired rows, ranking by cosine similarity.
/// A tie with the true partner counts against it only for lower indices.
pub fn evaluate_retrieval(x: &EmbeddingMatrix, y: &EmbeddingMatrix, k: usize) -> Result<(f64, f64)> {
    if x.rows() != y.rows() {
        return Err(Error::PairCountMismatch {
            left: x.rows(),
            right: y.rows(),
        });
    }
    if x.cols() != y.cols() {
        return Err(Error::DimensionMismatch {
            left: x.cols(),
            right: y.cols(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    let n = x.rows();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let mut sim = Vec::with_capacity(n * n);
    for xi in x.iter_rows() {
        for yj in y.iter_rows() {
            sim.push(cosine_sim(xi, yj)?);
        }
    }
    let rank = |score: &dyn Fn(usize) -> f64, target: usize| {
        let s = score(target);
        (0..n)
            .filter(|&j| score(j) > s || (j < target && score(j) == s))
            .count()
    };
    let mut i2t = 0;
    let mut t2i = 0;
    for i in 0..n {
        if rank(&|j| sim[i * n + j], i) < k {
            i2t += 1;
        }
        if rank(&|j| sim[j * n + i], i) < k {
            t2i += 1;
        }
    }
    Ok((i2t as f64 / n as f64, t2i as f64 / n as f64))
}

/// Held-out metrics of adapted, normalized evaluation embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub cs_divergence: f64,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub mean_embedding_gap: f64,
}

pub fn evaluate(
    adapters: &Adapters,
    x: &EmbeddingMatrix,
    y: &EmbeddingMatrix,
    kernel: KernelParams,
) -> Result<EvalMetrics> {
    let xn = l2_normalize_rows(&adapters.apply_x(x)?)?;
    let yn = l2_normalize_rows(&adapters.apply_y(y)?)?;
    let cs = cs_divergence(&xn, &yn, kernel)?.finite()?;
    let (a1, b1) = evaluate_retrieval(&xn, &yn, 1)?;
    let (a5, b5) = evaluate_retrieval(&xn, &yn, 5)?;
    let gap: Vec<f64> = xn
        .column_means()
        .iter()
        .zip(yn.column_means())
        .map(|(a, b)| a - b)
        .collect();
    Ok(EvalMetrics {
        cs_divergence: cs,
        recall_at_1: 0.5 * (a1 + b1),
        recall_at_5: 0.5 * (a5 + b5),
        mean_embedding_gap: norm(&gap),
    })
}

/// Consecutive batch ranges over `n` items; a trailing batch of one row
/// joins the previous batch.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(n)))
        .collect();
    if out.len() > 1 && out[out.len() - 1].1 - out[out.len() - 1].0 == 1 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().1 = last.1;
    }
    out
}

/// The `b`-th of `parts` near-equal slices of `0..count`.
fn share(count: usize, b: usize, parts: usize) -> (usize, usize) {
    (b * count / parts, (b + 1) * count / parts)
}

struct Side<'a> {
    params: Option<&'a mut AdapterParams>,
}

struct Adapted {
    out: EmbeddingMatrix,
    trace: Option<Trace>,
}

impl Side<'_> {
    fn forward(&self, m: &EmbeddingMatrix) -> Result<Adapted> {
        match self.params.as_deref() {
            Some(p) => {
                let (out, trace) = p.forward_traced(m)?;
                Ok(Adapted {
                    out,
                    trace: Some(trace),
                })
            }
            None => Ok(Adapted {
                out: m.clone(),
                trace: None,
            }),
        }
    }

    fn backward(&self, adapted: &Adapted, upstream: &EmbeddingMatrix, grad: &mut [f64]) {
        if let (Some(p), Some(t)) = (self.params.as_deref(), &adapted.trace) {
            p.backward(t, upstream, grad);
        }
    }
}

fn abort_reason(err: &Error) -> Option<String> {
    match err {
        Error::NonOverlapping | Error::NonOverlappingTokens { .. } => Some(format!("{err}")),
        Error::ZeroNormRow { .. } | Error::ZeroNormVector | Error::NonFinite { .. } => {
            Some(format!("degenerate embeddings ({err})"))
        }
        _ => None,
    }
}

fn aborting<T>(epoch: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match abort_reason(&e) {
        Some(reason) => Error::TrainingAborted { epoch, reason },
        None => e,
    })
}

fn check_extras(cfg: &TrainConfig, data: &PairedDataset, extras: &TrainExtras) -> Result<()> {
    let expected = match cfg.regime {
        Regime::CombinedUnpaired => "an unpaired pool",
        Regime::CombinedMulticaption => "a multi-caption dataset",
        Regime::CombinedToken => "token batches",
        _ => "no extras",
    };
    let matches = matches!(
        (cfg.regime, extras),
        (Regime::CombinedUnpaired, TrainExtras::Unpaired(_))
            | (Regime::CombinedMulticaption, TrainExtras::MultiCaption(_))
            | (Regime::CombinedToken, TrainExtras::Tokens { .. })
            | (
                Regime::InfonceOnly | Regime::CsOnly | Regime::Combined,
                TrainExtras::None
            )
    );
    if !matches {
        return Err(Error::InvalidParameter(format!(
            "regime {} expects {expected}",
            cfg.regime
        )));
    }
    let dim_ok = |cols: usize| {
        if cols == data.dim() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left: data.dim(),
                right: cols,
            })
        }
    };
    match extras {
        TrainExtras::None => {}
        TrainExtras::Unpaired(pool) => {
            dim_ok(pool.extra_x.cols())?;
            dim_ok(pool.extra_y.cols())?;
        }
        TrainExtras::MultiCaption(mc) => {
            if mc.len() != data.len() {
                return Err(Error::PairCountMismatch {
                    left: data.len(),
                    right: mc.len(),
                });
            }
            dim_ok(mc.x.cols())?;
        }
        TrainExtras::Tokens { vision, text } => {
            if vision.len() != text.len() {
                return Err(Error::BatchSizeMismatch {
                    left: vision.len(),
                    right: text.len(),
                });
            }
            dim_ok(vision.dim())?;
            dim_ok(text.dim())?;
        }
    }
    Ok(())
}

#[derive(Default)]
struct EpochSums {
    batches: usize,
    total: f64,
    infonce: f64,
    cs: f64,
    token: f64,
}

/// Stacks token samples into one matrix, remembering each sample's rows.
fn stack_tokens(batch: &TokenBatch, indices: &[usize]) -> Result<(EmbeddingMatrix, Vec<usize>)> {
    let parts: Vec<&EmbeddingMatrix> = indices.iter().map(|&i| batch.sample(i)).collect();
    let lens = parts.iter().map(|m| m.rows()).collect();
    Ok((EmbeddingMatrix::vstack(&parts)?, lens))
}

fn unstack(m: &EmbeddingMatrix, lens: &[usize]) -> Vec<EmbeddingMatrix> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let part = m.slice_rows(start, start + l);
            start += l;
            part
        })
        .collect()
}

/// Trains adapters under `cfg.regime`. The last `ceil(eval_fraction * N)`
/// pairs are held out; every epoch appends one row of mean mini-batch losses
/// and held-out metrics.
pub fn train(cfg: &TrainConfig, data: &PairedDataset, extras: &TrainExtras) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_extras(cfg, data, extras)?;
    let n = data.len();
    let n_eval = cfg.eval_count(n);
    let n_train = n.saturating_sub(n_eval);
    let min_train = if cfg.regime.uses_infonce() { 2 } else { 1 };
    if n_eval == 0 || n_train < min_train {
        return Err(Error::InvalidParameter(format!(
            "{n} pairs leave {n_train} for training and {n_eval} for evaluation"
        )));
    }
    let x_train = data.x.slice_rows(0, n_train);
    let y_train = data.y.slice_rows(0, n_train);
    let x_eval = data.x.slice_rows(n_train, n);
    let y_eval = data.y.slice_rows(n_train, n);

    let dim = data.dim();
    let mut init_rng = RandomSource::with_stream(cfg.seed, INIT_STREAM);
    let mut px = cfg
        .adapt_side
        .adapts_x()
        .then(|| AdapterParams::init(cfg.adapter, dim, dim, &mut init_rng))
        .transpose()?;
    let mut py = cfg
        .adapt_side
        .adapts_y()
        .then(|| AdapterParams::init(cfg.adapter, dim, dim, &mut init_rng))
        .transpose()?;
    let mut adam_x = px.as_ref().map(|p| Adam::new(cfg.learning_rate, p.param_count()));
    let mut adam_y = py.as_ref().map(|p| Adam::new(cfg.learning_rate, p.param_count()));

    let mut rng = RandomSource::with_stream(cfg.seed, SHUFFLE_STREAM);
    let mut pool_x_rng = RandomSource::with_stream(cfg.seed, POOL_X_STREAM);
    let mut pool_y_rng = RandomSource::with_stream(cfg.seed, POOL_Y_STREAM);
    let mut token_rng = RandomSource::with_stream(cfg.seed, TOKEN_STREAM);
    let weights = cfg.regime.weights(cfg.loss.lambda);
    let kernel = cfg.loss.kernel()?;
    let mut order: Vec<usize> = (0..n_train).collect();
    let (pool_x_len, pool_y_len, token_len) = match extras {
        TrainExtras::Unpaired(p) => (p.extra_x.rows(), p.extra_y.rows(), 0),
        TrainExtras::Tokens { vision, .. } => (0, 0, vision.len()),
        _ => (0, 0, 0),
    };
    let mut pool_x_order: Vec<usize> = (0..pool_x_len).collect();
    let mut pool_y_order: Vec<usize> = (0..pool_y_len).collect();
    let mut token_order: Vec<usize> = (0..token_len).collect();
    let ranges = batch_ranges(n_train, cfg.batch_size);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        pool_x_rng.shuffle(&mut pool_x_order);
        pool_y_rng.shuffle(&mut pool_y_order);
        token_rng.shuffle(&mut token_order);
        let mut sums = EpochSums::default();

        for (b, &(start, end)) in ranges.iter().enumerate() {
            let idx = &order[start..end];
            let mut gx = px.as_ref().map(|p| vec![0.0; p.param_count()]);
            let mut gy = py.as_ref().map(|p| vec![0.0; p.param_count()]);
            let side_x = Side { params: px.as_mut() };
            let side_y = Side { params: py.as_mut() };

            let (ex, ey) = match extras {
                TrainExtras::Unpaired(p) => {
                    let (sx, tx) = share(pool_x_len, b, ranges.len());
                    let (sy, ty) = share(pool_y_len, b, ranges.len());
                    (
                        Some(p.extra_x.select_rows(&pool_x_order[sx..tx])),
                        Some(p.extra_y.select_rows(&pool_y_order[sy..ty])),
                    )
                }
                TrainExtras::MultiCaption(mc) => (None, Some(mc.extra_captions(idx))),
                _ => (None, None),
            };
            let xb = side_x.forward(&x_train.select_rows(idx))?;
            let yb = side_y.forward(&y_train.select_rows(idx))?;
            let exb = ex.as_ref().map(|m| side_x.forward(m)).transpose()?;
            let eyb = ey.as_ref().map(|m| side_y.forward(m)).transpose()?;
            let inputs = ObjectiveInputs {
                x: &xb.out,
                y: &yb.out,
                unpaired_x: exb.as_ref().map(|a| &a.out),
                unpaired_y: eyb.as_ref().map(|a| &a.out),
            };
            let (terms, grad) = aborting(epoch, weighted_objective(inputs, weights, &cfg.loss))?;
            let mut total = terms.total;

            if let Some(g) = gx.as_mut() {
                side_x.backward(&xb, &grad.paired.d_x, g);
                if let (Some(a), Some(d)) = (&exb, &grad.d_unpaired_x) {
                    side_x.backward(a, d, g);
                }
            }
            if let Some(g) = gy.as_mut() {
                side_y.backward(&yb, &grad.paired.d_y, g);
                if let (Some(a), Some(d)) = (&eyb, &grad.d_unpaired_y) {
                    side_y.backward(a, d, g);
                }
            }

            if let TrainExtras::Tokens { vision, text } = extras {
                let (s, t) = share(token_len, b, ranges.len());
                let chosen = &token_order[s..t];
                if !chosen.is_empty() {
                    let (vs, vlens) = stack_tokens(vision, chosen)?;
                    let (ts, tlens) = stack_tokens(text, chosen)?;
                    let va = side_x.forward(&vs)?;
                    let ta = side_y.forward(&ts)?;
                    let vn = aborting(epoch, l2_normalize_rows(&va.out))?;
                    let tn = aborting(epoch, l2_normalize_rows(&ta.out))?;
                    let vb = TokenBatch::new(unstack(&vn, &vlens))?;
                    let tb = TokenBatch::new(unstack(&tn, &tlens))?;
                    let (value, tg) = aborting(epoch, token_value_and_grad(&vb, &tb, kernel))?;
                    let refs = |ms: &[EmbeddingMatrix]| -> Result<EmbeddingMatrix> {
                        EmbeddingMatrix::vstack(&ms.iter().collect::<Vec<_>>())
                    };
                    let mut dv = grad_normalize_chain(&va.out, &refs(&tg.vision)?)?;
                    let mut dt = grad_normalize_chain(&ta.out, &refs(&tg.text)?)?;
                    for m in [&mut dv, &mut dt] {
                        m.as_mut_slice().iter_mut().for_each(|v| *v *= cfg.token_weight);
                    }
                    if let Some(g) = gx.as_mut() {
                        side_x.backward(&va, &dv, g);
                    }
                    if let Some(g) = gy.as_mut() {
                        side_y.backward(&ta, &dt, g);
                    }
                    total += cfg.token_weight * value;
                    sums.token += value;
                }
            }

            if !total.is_finite() {
                return Err(Error::TrainingAborted {
                    epoch,
                    reason: format!("loss is not finite ({total})"),
                });
            }
            sums.batches += 1;
            sums.total += total;
            sums.infonce += terms.infonce.unwrap_or(0.0);
            sums.cs += terms.cs.unwrap_or(0.0);

            if let (Some(p), Some(a), Some(g)) = (px.as_mut(), adam_x.as_mut(), gx.as_ref()) {
                a.step(p, g);
            }
            if let (Some(p), Some(a), Some(g)) = (py.as_mut(), adam_y.as_mut(), gy.as_ref()) {
                a.step(p, g);
            }
        }

        let adapters = Adapters {
            x: px.clone(),
            y: py.clone(),
        };
        let eval = aborting(epoch, evaluate(&adapters, &x_eval, &y_eval, kernel))?;
        if !(eval.cs_divergence.is_finite() && eval.mean_embedding_gap.is_finite()) {
            return Err(Error::TrainingAborted {
                epoch,
                reason: "evaluation produced non-finite metrics".into(),
            });
        }
        let count = sums.batches as f64;
        metrics.push(MetricsRow {
            epoch,
            loss_total: sums.total / count,
            loss_infonce: weights.infonce.map(|_| sums.infonce / count),
            loss_cs: weights.cs.map(|_| sums.cs / count),
            loss_token: (cfg.regime == Regime::CombinedToken).then(|| sums.token / count),
            eval_cs_divergence: eval.cs_divergence,
            recall_at_1: eval.recall_at_1,
            recall_at_5: eval.recall_at_5,
            mean_embedding_gap: eval.mean_embedding_gap,
        });
    }

    Ok(TrainOutcome {
        adapters: Adapters { x: px, y: py },
        metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            sigmas: vec![0.5, 1.0, 1.5],
        }
    }
}

impl SweepGrid {
    /// Grid points, λ-major.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.lambdas
            .iter()
            .flat_map(|&l| self.sigmas.iter().map(move |&s| (l, s)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub sigma: f64,
    pub final_eval_cs: f64,
    pub final_recall_at_1: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "lambda,sigma,final_eval_cs,final_recall_at_1";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            fmt_shortest(self.lambda),
            fmt_shortest(self.sigma),
            fmt_shortest(self.final_eval_cs),
            fmt_shortest(self.final_recall_at_1)
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SweepRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// One training run per (λ, σ) grid point, on up to `threads` worker
/// threads. Rows come back in grid order regardless of scheduling.
pub fn sweep(
    base: &TrainConfig,
    data: &PairedDataset,
    extras: &TrainExtras,
    grid: &SweepGrid,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::InvalidParameter("sweep grid is empty".into()));
    }
    let configs = points
        .iter()
        .map(|&(lambda, sigma)| {
            let cfg = TrainConfig {
                loss: LossConfig {
                    lambda,
                    sigma,
                    ..base.loss
                },
                ..base.clone()
            };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |cfg: &TrainConfig| -> Result<SweepRow> {
        let outcome = train(cfg, data, extras)?;
        let last = outcome.metrics.last().expect("epochs >= 1");
        Ok(SweepRow {
            lambda: cfg.loss.lambda,
            sigma: cfg.loss.sigma,
            final_eval_cs: last.eval_cs_divergence,
            final_recall_at_1: last.recall_at_1,
        })
    };
    let threads = threads.clamp(1, configs.len());
    let mut results: Vec<Option<Result<SweepRow>>> = (0..configs.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, cfg) in results.iter_mut().zip(&configs) {
            *slot = Some(run(cfg));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let configs = &configs;
                    let run = &run;
                    scope.spawn(move || {
                        (w..configs.len())
                            .step_by(threads)
                            .map(|i| (i, run(&configs[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("sweep worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }
    results.into_iter().map(|r| r.expect("every grid point ran")).collect()
}
