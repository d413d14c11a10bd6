//! Dense embedding tables, seeded sampling and row normalization.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rows with a Euclidean norm at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Row-major table of `rows` embeddings of dimension `cols`. Every entry is
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if cols == 0 {
            return Err(Error::InvalidShape("embedding dimension must be >= 1".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    left: cols,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(cols >= 1, "embedding dimension must be >= 1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// An `0 x cols` matrix.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    /// Skips validation. Used for distance tables that may have zero columns.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty slice with cols >= 1 yields nothing.
        self.data.chunks_exact(self.cols.max(1))
    }

    /// Rows of `self` at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Stacks matrices of equal width vertically.
    pub fn vstack(parts: &[&EmbeddingMatrix]) -> Result<Self> {
        let cols = parts.first().ok_or(Error::EmptySet)?.cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::DimensionMismatch {
                    left: cols,
                    right: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    /// Adds `offset` to every row.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        check_dims(self.cols, offset.len())?;
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, c) in out.row_mut(r).iter_mut().zip(offset) {
                *v += c;
            }
        }
        Ok(out)
    }

    /// Column means; zeros for an empty matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        if self.rows > 0 {
            let n = self.rows as f64;
            mean.iter_mut().for_each(|m| *m /= n);
        }
        mean
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn check_dims(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::DimensionMismatch { left, right });
    }
    Ok(())
}

#[inline]
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

#[inline]
pub fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = norm(row);
        if !(n > NORM_EPS) {
            return Err(Error::ZeroNormRow { row: r });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Squared Euclidean distances between every row of `x` and every row of
/// `y`, as an `x.rows() x y.rows()` table.
pub fn pairwise_sq_dists(x: &EmbeddingMatrix, y: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    check_dims(x.cols, y.cols)?;
    let mut data = Vec::with_capacity(x.rows * y.rows);
    for xi in x.iter_rows() {
        data.extend(y.iter_rows().map(|yj| sq_dist(xi, yj)));
    }
    Ok(EmbeddingMatrix::from_raw(x.rows, y.rows, data))
}

/// Shortest decimal text that parses back to the same `f64`, switching to
/// exponent notation for very large or very small magnitudes.
pub fn fmt_shortest(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-5..1e16).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u.len(), v.len())?;
    let nu = norm(u);
    let nv = norm(v);
    if !(nu > NORM_EPS && nv > NORM_EPS) {
        return Err(Error::ZeroNormVector);
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Seeded 64-bit generator (ChaCha8) with Box–Muller normal draws.
///
/// Normals are produced in pairs; the second value of each pair is cached
/// and handed out by the next call so the stream never skips a branch.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            seed,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform integer in `[low, high]`.
    pub fn range_inclusive(&mut self, low: usize, high: usize) -> usize {
        self.rng.random_range(low..=high)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// A univariate normal distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub mean: f64,
    pub std: f64,
}

impl GaussianSpec {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gaussian needs finite mean and std > 0, got ({mean}, {std})"
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn variance(&self) -> f64 {
        self.std * self.std
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.log_pdf(x).exp()
    }
}

/// A bivariate normal with covariance `[[sx^2, rho sx sy], [rho sx sy, sy^2]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariateGaussianSpec {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub rho: f64,
}

impl BivariateGaussianSpec {
    pub fn new(mean_x: f64, mean_y: f64, std_x: f64, std_y: f64, rho: f64) -> Result<Self> {
        GaussianSpec::new(mean_x, std_x)?;
        GaussianSpec::new(mean_y, std_y)?;
        if !(rho.abs() < 1.0) {
            return Err(Error::InvalidCorrelation(rho));
        }
        Ok(Self {
            mean_x,
            mean_y,
            std_x,
            std_y,
            rho,
        })
    }
}

/// Paired one-dimensional draws from a bivariate normal, via the explicit
/// 2x2 Cholesky factor `[[sx, 0], [rho sy, sy sqrt(1 - rho^2)]]`.
pub fn sample_bivariate(
    spec: &BivariateGaussianSpec,
    n: usize,
    rng: &mut RandomSource,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    let tail = (1.0 - spec.rho * spec.rho).sqrt();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = rng.standard_normal();
        let z2 = rng.standard_normal();
        xs.push(spec.mean_x + spec.std_x * z1);
        ys.push(spec.mean_y + spec.std_y * (spec.rho * z1 + tail * z2));
    }
    Ok((EmbeddingMatrix::from_raw(n, 1, xs), EmbeddingMatrix::from_raw(n, 1, ys)))
}

/// `n x dim` matrix of i.i.d. draws from `spec`.
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, dim: usize, rng: &mut RandomSource) -> Result<EmbeddingMatrix> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "sample count and dimension must be >= 1".into(),
        ));
    }
    let data = (0..n * dim).map(|_| rng.normal(spec.mean, spec.std)).collect();
    Ok(EmbeddingMatrix::from_raw(n, dim, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.get(0, 1) - 0.8).abs() < 1e-15);

        let e1 = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize_rows(&e1).unwrap(), e1);

        let z = EmbeddingMatrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize_rows(&z), Err(Error::ZeroNormRow { row: 1 })));
    }

    #[test]
    fn distance_examples() {
        let x = EmbeddingMatrix::from_rows(&[[0.0]]).unwrap();
        let y = EmbeddingMatrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(pairwise_sq_dists(&x, &y).unwrap().as_slice(), &[4.0]);

        let x = EmbeddingMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let y = EmbeddingMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(pairwise_sq_dists(&x, &y).unwrap().as_slice(), &[2.0]);

        let y3 = EmbeddingMatrix::from_rows(&[[0.0, 1.0, 2.0]]).unwrap();
        assert!(matches!(
            pairwise_sq_dists(&x, &y3),
            Err(Error::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNormVector)
        ));
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0]).is_err());
        assert!(EmbeddingMatrix::new(1, 0, vec![]).is_err());
        assert!(matches!(
            EmbeddingMatrix::new(2, 2, vec![0.0, 0.0, f64::NAN, 0.0]),
            Err(Error::NonFinite { row: 1, col: 0 })
        ));
        assert!(BivariateGaussianSpec::new(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(GaussianSpec::new(0.0, 0.0).is_err());
    }

    #[test]
    fn bivariate_correlation() {
        let strong = BivariateGaussianSpec::new(0.0, 0.0, 1.0, 1.0, 0.99).unwrap();
        let (x, y) = sample_bivariate(&strong, 100_000, &mut RandomSource::new(7)).unwrap();
        let r = pearson(x.as_slice(), y.as_slice());
        assert!((0.985..=0.995).contains(&r), "r = {r}");

        let indep = BivariateGaussianSpec::new(0.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        let (x, y) = sample_bivariate(&indep, 100_000, &mut RandomSource::new(7)).unwrap();
        assert!(pearson(x.as_slice(), y.as_slice()).abs() < 0.02);

        let (x2, y2) = sample_bivariate(&indep, 100_000, &mut RandomSource::new(7)).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
    }

    #[test]
    fn gaussian_moments() {
        let spec = GaussianSpec::new(0.0, 1.0).unwrap();
        let m = sample_gaussian(&spec, 50_000, 1, &mut RandomSource::new(11)).unwrap();
        let n = m.rows() as f64;
        let mean = m.as_slice().iter().sum::<f64>() / n;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((0.98..=1.02).contains(&var.sqrt()), "std {}", var.sqrt());

        let point = GaussianSpec::new(3.0, 1e-9).unwrap();
        let m = sample_gaussian(&point, 1000, 2, &mut RandomSource::new(1)).unwrap();
        assert!(m.as_slice().iter().all(|v| (v - 3.0).abs() < 1e-7));

        let again = sample_gaussian(&point, 1000, 2, &mut RandomSource::new(1)).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn streams_are_independent() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = RandomSource::with_stream(5, 0);
                move |_| r.next_u64()
            })
            .collect();
        let b: Vec<u64> = (0..4)
            .map({
                let mut r = RandomSource::with_stream(5, 1);
                move |_| r.next_u64()
            })
            .collect();
        assert_ne!(a, b);
    }

    fn matrix_strategy(max_rows: usize, cols: usize) -> impl Strategy<Value = EmbeddingMatrix> {
        proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, cols), 1..max_rows)
            .prop_map(|rows| EmbeddingMatrix::from_rows(&rows).unwrap())
    }

    proptest! {
        #[test]
        fn self_distances_are_symmetric(x in matrix_strategy(12, 3)) {
            let d = pairwise_sq_dists(&x, &x).unwrap();
            for i in 0..x.rows() {
                prop_assert_eq!(d.get(i, i), 0.0);
                for j in 0..x.rows() {
                    prop_assert_eq!(d.get(i, j), d.get(j, i));
                    prop_assert!(d.get(i, j) >= 0.0);
                }
            }
        }

        #[test]
        fn normalization_is_idempotent(x in matrix_strategy(12, 4)) {
            prop_assume!(x.iter_rows().all(|r| norm(r) > 1e-3));
            let once = l2_normalize_rows(&x).unwrap();
            let twice = l2_normalize_rows(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for r in once.iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric(u in proptest::collection::vec(-3.0f64..3.0, 5), v in proptest::collection::vec(-3.0f64..3.0, 5)) {
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let a = cosine_sim(&u, &v).unwrap();
            let b = cosine_sim(&v, &u).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
