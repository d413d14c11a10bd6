//! Synthetic paired data with a controllable modality gap, unpaired pools,
//! multi-caption sets and token clouds, plus embedding file I/O.
//!
//! The paired generator draws a shared latent `z ~ N(0, I)` and emits
//! `x = A z + eps`, `y = B z + gap * g + eta`. `A`, `B` and the unit
//! direction `g` come from a structure stream of the seed; samples come
//! from separate streams so the unpaired pool shares the structure but not
//! the draws.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::divergence::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{fmt_shortest, norm, EmbeddingMatrix, RandomSource};

const STRUCTURE_STREAM: u64 = 0;
const PAIRED_STREAM: u64 = 1;
const UNPAIRED_X_STREAM: u64 = 2;
const UNPAIRED_Y_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub gap: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Use the same linear map for both modalities (`B = A`).
    #[serde(default)]
    pub shared_map: bool,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::InvalidParameter("n_pairs must be >= 1".into()));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidParameter("latent_dim and embed_dim must be >= 1".into()));
        }
        if !(self.gap.is_finite() && self.gap >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gap must be finite and >= 0, got {}",
                self.gap
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    Files { x: PathBuf, y: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub x: EmbeddingMatrix,
    pub y: EmbeddingMatrix,
    pub provenance: Provenance,
}

impl PairedDataset {
    pub fn new(x: EmbeddingMatrix, y: EmbeddingMatrix, provenance: Provenance) -> Result<Self> {
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
        Ok(Self { x, y, provenance })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Pairs at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            provenance: self.provenance.clone(),
        }
    }
}

/// Images with one or more caption embeddings each.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCaptionDataset {
    pub x: EmbeddingMatrix,
    captions: Vec<EmbeddingMatrix>,
}

impl MultiCaptionDataset {
    pub fn new(x: EmbeddingMatrix, captions: Vec<EmbeddingMatrix>) -> Result<Self> {
        if captions.len() != x.rows() {
            return Err(Error::PairCountMismatch {
                left: x.rows(),
                right: captions.len(),
            });
        }
        for (i, c) in captions.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::InvalidShape(format!("image {i} has no captions")));
            }
            if c.cols() != x.cols() {
                return Err(Error::DimensionMismatch {
                    left: x.cols(),
                    right: c.cols(),
                });
            }
        }
        Ok(Self { x, captions })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    /// Captions of image `i`, one per row; row 0 is the paired caption.
    pub fn captions(&self, i: usize) -> &EmbeddingMatrix {
        &self.captions[i]
    }

    /// The first caption of every image.
    pub fn first_captions(&self) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(self.len(), self.x.cols());
        for (i, c) in self.captions.iter().enumerate() {
            out.row_mut(i).copy_from_slice(c.row(0));
        }
        out
    }

    /// Captions beyond the first for the given images, stacked in order.
    pub fn extra_captions(&self, images: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in images {
            let c = &self.captions[i];
            data.extend_from_slice(&c.as_slice()[c.cols()..]);
            rows += c.rows() - 1;
        }
        EmbeddingMatrix::from_raw(rows, self.x.cols(), data)
    }
}

/// Unpaired samples from each modality; counts may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct UnpairedPool {
    pub extra_x: EmbeddingMatrix,
    pub extra_y: EmbeddingMatrix,
}

impl UnpairedPool {
    pub fn new(extra_x: EmbeddingMatrix, extra_y: EmbeddingMatrix) -> Result<Self> {
        if extra_x.cols() != extra_y.cols() {
            return Err(Error::DimensionMismatch {
                left: extra_x.cols(),
                right: extra_y.cols(),
            });
        }
        Ok(Self { extra_x, extra_y })
    }

    pub fn is_empty(&self) -> bool {
        self.extra_x.is_empty() && self.extra_y.is_empty()
    }
}

struct Structure {
    a: EmbeddingMatrix,
    b: EmbeddingMatrix,
    g: Vec<f64>,
}

fn random_unit(rng: &mut RandomSource, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

impl Structure {
    fn from_config(cfg: &SyntheticConfig) -> Self {
        let mut rng = RandomSource::with_stream(cfg.seed, STRUCTURE_STREAM);
        let std = (1.0 / cfg.latent_dim as f64).sqrt();
        let mut map = || {
            let data = (0..cfg.embed_dim * cfg.latent_dim)
                .map(|_| rng.normal(0.0, std))
                .collect();
            EmbeddingMatrix::from_raw(cfg.embed_dim, cfg.latent_dim, data)
        };
        let a = map();
        let b = if cfg.shared_map { a.clone() } else { map() };
        let g = random_unit(&mut rng, cfg.embed_dim);
        Self { a, b, g }
    }

    /// `map * z + offset + noise`, written into `out`.
    fn emit(
        map: &EmbeddingMatrix,
        z: &[f64],
        offset: Option<(&[f64], f64)>,
        noise: f64,
        rng: &mut RandomSource,
        out: &mut [f64],
    ) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut v: f64 = map.row(r).iter().zip(z).map(|(a, b)| a * b).sum();
            if let Some((g, gap)) = offset {
                v += gap * g[r];
            }
            *o = v + rng.normal(0.0, noise);
        }
    }
}

fn latent(rng: &mut RandomSource, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.standard_normal()).collect()
}

pub fn gen_paired(cfg: &SyntheticConfig) -> Result<PairedDataset> {
    cfg.validate()?;
    let s = Structure::from_config(cfg);
    let mut rng = RandomSource::with_stream(cfg.seed, PAIRED_STREAM);
    let d = cfg.embed_dim;
    let mut x = EmbeddingMatrix::zeros(cfg.n_pairs, d);
    let mut y = EmbeddingMatrix::zeros(cfg.n_pairs, d);
    for i in 0..cfg.n_pairs {
        let z = latent(&mut rng, cfg.latent_dim);
        Structure::emit(&s.a, &z, None, cfg.noise_std, &mut rng, x.row_mut(i));
        Structure::emit(&s.b, &z, Some((&s.g, cfg.gap)), cfg.noise_std, &mut rng, y.row_mut(i));
    }
    PairedDataset::new(x, y, Provenance::Synthetic(cfg.clone()))
}

/// The unit offset direction `g` used by [`gen_paired`] for this config.
pub fn gap_direction(cfg: &SyntheticConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(Structure::from_config(cfg).g)
}

/// Fresh unpaired draws from the same generative process as [`gen_paired`].
pub fn gen_unpaired(cfg: &SyntheticConfig, m_x: usize, m_y: usize) -> Result<UnpairedPool> {
    cfg.validate()?;
    let s = Structure::from_config(cfg);
    let d = cfg.embed_dim;

    let mut rng = RandomSource::with_stream(cfg.seed, UNPAIRED_X_STREAM);
    let mut extra_x = EmbeddingMatrix::zeros(m_x, d);
    for i in 0..m_x {
        let z = latent(&mut rng, cfg.latent_dim);
        Structure::emit(&s.a, &z, None, cfg.noise_std, &mut rng, extra_x.row_mut(i));
    }
    let mut rng = RandomSource::with_stream(cfg.seed, UNPAIRED_Y_STREAM);
    let mut extra_y = EmbeddingMatrix::zeros(m_y, d);
    for i in 0..m_y {
        let z = latent(&mut rng, cfg.latent_dim);
        Structure::emit(
            &s.b,
            &z,
            Some((&s.g, cfg.gap)),
            cfg.noise_std,
            &mut rng,
            extra_y.row_mut(i),
        );
    }
    UnpairedPool::new(extra_x, extra_y)
}

/// `k` captions per image: the paired caption followed by `k - 1` noisy copies.
pub fn gen_multi_caption(
    base: &PairedDataset,
    k: usize,
    caption_noise: f64,
    rng: &mut RandomSource,
) -> Result<MultiCaptionDataset> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be >= 1".into()));
    }
    if !(caption_noise.is_finite() && caption_noise >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "caption noise must be >= 0, got {caption_noise}"
        )));
    }
    let d = base.dim();
    let captions = base
        .y
        .iter_rows()
        .map(|yi| {
            let mut c = EmbeddingMatrix::zeros(k, d);
            c.row_mut(0).copy_from_slice(yi);
            for j in 1..k {
                for (o, &v) in c.row_mut(j).iter_mut().zip(yi) {
                    *o = v + rng.normal(0.0, caption_noise);
                }
            }
            c
        })
        .collect();
    MultiCaptionDataset::new(base.x.clone(), captions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenCloudConfig {
    pub n: usize,
    pub v_range: (usize, usize),
    pub l_range: (usize, usize),
    pub dim: usize,
    pub gap: f64,
    /// Within-cloud standard deviation.
    #[serde(default = "unit")]
    pub noise: f64,
    /// Standard deviation of the per-sample centers.
    #[serde(default = "unit")]
    pub center_std: f64,
}

fn unit() -> f64 {
    1.0
}

impl TokenCloudConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::InvalidParameter("token n and dim must be >= 1".into()));
        }
        for (name, (lo, hi)) in [("v_range", self.v_range), ("l_range", self.l_range)] {
            if lo == 0 || lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "{name} must satisfy 1 <= min <= max, got ({lo}, {hi})"
                )));
            }
        }
        for (name, v) in [
            ("gap", self.gap),
            ("noise", self.noise),
            ("center_std", self.center_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ragged vision/text token clouds around shared per-sample centers, the
/// text cloud offset by `gap` along a random unit direction.
pub fn gen_token_clouds(cfg: &TokenCloudConfig, rng: &mut RandomSource) -> Result<(TokenBatch, TokenBatch)> {
    cfg.validate()?;
    let g = random_unit(rng, cfg.dim);
    token_clouds(cfg, &g, rng)
}

/// As [`gen_token_clouds`] with a caller-chosen unit offset direction, for
/// clouds that share the modality gap of a paired dataset.
pub fn gen_token_clouds_along(
    cfg: &TokenCloudConfig,
    direction: &[f64],
    rng: &mut RandomSource,
) -> Result<(TokenBatch, TokenBatch)> {
    cfg.validate()?;
    if direction.len() != cfg.dim {
        return Err(Error::DimensionMismatch {
            left: cfg.dim,
            right: direction.len(),
        });
    }
    let n = norm(direction);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::ZeroNormVector);
    }
    let g: Vec<f64> = direction.iter().map(|v| v / n).collect();
    token_clouds(cfg, &g, rng)
}

fn token_clouds(cfg: &TokenCloudConfig, g: &[f64], rng: &mut RandomSource) -> Result<(TokenBatch, TokenBatch)> {
    let mut vision = Vec::with_capacity(cfg.n);
    let mut text = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let v_len = rng.range_inclusive(cfg.v_range.0, cfg.v_range.1);
        let l_len = rng.range_inclusive(cfg.l_range.0, cfg.l_range.1);
        let center: Vec<f64> = (0..cfg.dim).map(|_| rng.normal(0.0, cfg.center_std)).collect();
        let mut cloud = |len: usize, shift: f64| {
            let mut m = EmbeddingMatrix::zeros(len, cfg.dim);
            for r in 0..len {
                for ((o, &c), &gc) in m.row_mut(r).iter_mut().zip(&center).zip(g) {
                    *o = c + shift * gc + rng.normal(0.0, cfg.noise);
                }
            }
            m
        };
        vision.push(cloud(v_len, 0.0));
        text.push(cloud(l_len, cfg.gap));
    }
    Ok((TokenBatch::new(vision)?, TokenBatch::new(text)?))
}

/// EMBT/1 text: `embt 1 <rows> <cols>` then one space-separated row per line.
/// Values use the shortest representation that parses back to the same bits.
pub fn format_embeddings(m: &EmbeddingMatrix) -> String {
    let mut out = format!("embt 1 {} {}\n", m.rows(), m.cols());
    for row in m.iter_rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", fmt_shortest(*v));
        }
        out.push('\n');
    }
    out
}

fn header_error(message: impl Into<String>) -> Error {
    Error::FileFormat {
        line: 1,
        message: message.into(),
    }
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text.split('\n');
    let header = lines.next().unwrap_or_default();
    let fields: Vec<&str> = header.split(' ').collect();
    let [magic, version, rows, cols] = fields[..] else {
        return Err(header_error(format!(
            "expected `embt 1 <rows> <cols>`, found `{header}`"
        )));
    };
    if magic != "embt" {
        return Err(header_error(format!("bad magic `{magic}`")));
    }
    if version != "1" {
        return Err(header_error(format!("unsupported version `{version}`")));
    }
    let parse_count = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| header_error(format!("bad {what} `{s}`")))
    };
    let rows = parse_count(rows, "row count")?;
    let cols = parse_count(cols, "column count")?;
    if cols == 0 {
        return Err(header_error("column count must be >= 1"));
    }

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        if line.is_empty() {
            // Only a trailing newline may leave an empty final line.
            continue;
        }
        if seen == rows {
            return Err(Error::FileFormat {
                line: line_no,
                message: format!("header declares {rows} rows but the body has more"),
            });
        }
        let before = data.len();
        for token in line.split(' ') {
            let v: f64 = token.parse().map_err(|_| Error::FileFormat {
                line: line_no,
                message: format!("not a number: `{token}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::FileFormat {
                    line: line_no,
                    message: format!("non-finite value `{token}`"),
                });
            }
            data.push(v);
        }
        let found = data.len() - before;
        if found != cols {
            return Err(Error::Dimension {
                line: line_no,
                expected: cols,
                found,
            });
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::FileFormat {
            line: seen + 2,
            message: format!("header declares {rows} rows but the body has {seen}"),
        });
    }
    EmbeddingMatrix::new(rows, cols, data)
}

/// Writes `bytes` to a temporary file beside `path`, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_atomic(path, format_embeddings(m).as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    parse_embeddings(&std::fs::read_to_string(path)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    id: u64,
    tokens: Vec<Vec<f64>>,
}

/// JSON array of `{ "id": <int>, "tokens": [[...], ...] }` records.
pub fn format_tokens(batch: &TokenBatch) -> Result<String> {
    let records: Vec<TokenRecord> = batch
        .samples()
        .iter()
        .enumerate()
        .map(|(i, m)| TokenRecord {
            id: i as u64,
            tokens: m.iter_rows().map(<[f64]>::to_vec).collect(),
        })
        .collect();
    Ok(serde_json::to_string(&records)? + "\n")
}

/// Parses a token document; samples keep document order.
pub fn parse_tokens(text: &str) -> Result<TokenBatch> {
    let records: Vec<TokenRecord> = serde_json::from_str(text)?;
    let samples = records
        .into_iter()
        .map(|r| {
            if r.tokens.is_empty() {
                return Err(Error::InvalidShape(format!("record {} has no tokens", r.id)));
            }
            EmbeddingMatrix::from_rows(&r.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    TokenBatch::new(samples)
}

pub fn write_tokens(path: &Path, batch: &TokenBatch) -> Result<()> {
    write_atomic(path, format_tokens(batch)?.as_bytes())
}

pub fn read_tokens(path: &Path) -> Result<TokenBatch> {
    parse_tokens(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{cs_divergence, token_cs_loss};
    use crate::kernels::KernelParams;
    use crate::numerics::l2_normalize_rows;

    fn cfg(n: usize, gap: f64, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n_pairs: n,
            latent_dim: 8,
            embed_dim: 8,
            gap,
            noise_std: 0.1,
            seed,
            shared_map: false,
        }
    }

    #[test]
    fn degenerate_config_gives_identical_modalities() {
        let c = SyntheticConfig {
            gap: 0.0,
            noise_std: 0.0,
            shared_map: true,
            ..cfg(50, 0.0, 3)
        };
        let d = gen_paired(&c).unwrap();
        assert_eq!(d.x, d.y);
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(100, 2.0, 11);
        assert_eq!(gen_paired(&c).unwrap(), gen_paired(&c).unwrap());
        assert_eq!(gen_unpaired(&c, 5, 7).unwrap(), gen_unpaired(&c, 5, 7).unwrap());
        let other = gen_paired(&cfg(100, 2.0, 12)).unwrap();
        assert_ne!(gen_paired(&c).unwrap().x, other.x);
    }

    #[test]
    fn gap_raises_divergence() {
        let p = KernelParams::default();
        let at = |gap| {
            let d = gen_paired(&cfg(2000, gap, 5)).unwrap();
            let x = l2_normalize_rows(&d.x).unwrap();
            let y = l2_normalize_rows(&d.y).unwrap();
            cs_divergence(&x, &y, p).unwrap().value().unwrap()
        };
        assert!(at(4.0) > at(0.0));
    }

    #[test]
    fn mean_offset_follows_gap_direction() {
        let c = SyntheticConfig {
            noise_std: 0.5,
            ..cfg(20000, 3.0, 8)
        };
        let d = gen_paired(&c).unwrap();
        let g = gap_direction(&c).unwrap();
        let mx = d.x.column_means();
        let my = d.y.column_means();
        // Column variance of y - x is sum of squared map entries plus two noise terms; bound it loosely.
        let se = (4.0f64 / 20000.0).sqrt();
        for j in 0..c.embed_dim {
            assert!((my[j] - mx[j] - 3.0 * g[j]).abs() < 3.0 * se, "coordinate {j}");
        }
    }

    #[test]
    fn unpaired_shapes() {
        let c = cfg(10, 1.0, 2);
        let pool = gen_unpaired(&c, 0, 0).unwrap();
        assert!(pool.is_empty());
        let pool = gen_unpaired(&c, 100, 250).unwrap();
        assert_eq!((pool.extra_x.rows(), pool.extra_x.cols()), (100, 8));
        assert_eq!((pool.extra_y.rows(), pool.extra_y.cols()), (250, 8));
    }

    #[test]
    fn multi_caption_examples() {
        let base = gen_paired(&cfg(40, 1.0, 4)).unwrap();
        let mut rng = RandomSource::new(1);
        let one = gen_multi_caption(&base, 1, 0.3, &mut rng).unwrap();
        assert_eq!(one.first_captions(), base.y);
        assert!(one.extra_captions(&[0, 1, 2]).is_empty());

        let exact = gen_multi_caption(&base, 5, 0.0, &mut rng).unwrap();
        for i in 0..base.len() {
            assert!(exact.captions(i).iter_rows().all(|r| r == base.y.row(i)));
        }

        let noisy = gen_multi_caption(&base, 5, 0.1, &mut rng).unwrap();
        assert_eq!(noisy.first_captions(), base.y);
        let bound = 2.0 * (0.1 / 5f64.sqrt()) * 8f64.sqrt();
        let within = (0..base.len())
            .filter(|&i| {
                let mean = noisy.captions(i).column_means();
                crate::numerics::sq_dist(&mean, base.y.row(i)).sqrt() <= bound
            })
            .count();
        assert!(within as f64 >= 0.95 * base.len() as f64);
        assert_eq!(noisy.extra_captions(&[3, 1]).rows(), 8);
        assert_eq!(noisy.extra_captions(&[3]).row(0), noisy.captions(3).row(1));
    }

    #[test]
    fn token_cloud_examples() {
        let p = KernelParams::default();
        let degenerate = TokenCloudConfig {
            n: 6,
            v_range: (1, 1),
            l_range: (1, 1),
            dim: 3,
            gap: 0.0,
            noise: 0.0,
            center_std: 1.0,
        };
        let (v, t) = gen_token_clouds(&degenerate, &mut RandomSource::new(1)).unwrap();
        assert_eq!(token_cs_loss(&v, &t, p).unwrap(), 0.0);

        let ragged = TokenCloudConfig {
            n: 20,
            v_range: (3, 7),
            l_range: (5, 12),
            dim: 4,
            gap: 0.0,
            noise: 1.0,
            center_std: 1.0,
        };
        let (v, t) = gen_token_clouds(&ragged, &mut RandomSource::new(2)).unwrap();
        for i in 0..20 {
            assert!((3..=7).contains(&v.sample(i).rows()));
            assert!((5..=12).contains(&t.sample(i).rows()));
        }
        let flat = token_cs_loss(&v, &t, p).unwrap();
        let shifted = TokenCloudConfig {
            gap: 3.0,
            ..ragged.clone()
        };
        let (v3, t3) = gen_token_clouds(&shifted, &mut RandomSource::new(2)).unwrap();
        assert!(token_cs_loss(&v3, &t3, p).unwrap() > flat);

        let bad = TokenCloudConfig {
            v_range: (4, 2),
            ..ragged
        };
        assert!(gen_token_clouds(&bad, &mut RandomSource::new(0)).is_err());
    }

    #[test]
    fn embt_round_trip_is_bitwise() {
        let mut rng = RandomSource::new(42);
        let data = (0..40).map(|_| rng.standard_normal()).collect();
        let mut m = EmbeddingMatrix::new(10, 4, data).unwrap();
        let extremes = [f64::MIN_POSITIVE, -f64::MAX, 5e-324, 1e-300, 0.1, -0.0];
        m.row_mut(9).copy_from_slice(&extremes[..4]);
        m.row_mut(8)[..2].copy_from_slice(&extremes[4..]);
        let back = parse_embeddings(&format_embeddings(&m)).unwrap();
        assert!(m
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embt");
        write_embeddings(&path, &m).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), m);
    }

    #[test]
    fn embt_format_errors() {
        assert!(matches!(
            parse_embeddings("embt 1 3 2\n1 2\n3 4\n"),
            Err(Error::FileFormat { line: 4, .. })
        ));
        assert!(matches!(
            parse_embeddings("embt 1 1 2\n1 2\n3 4\n"),
            Err(Error::FileFormat { line: 3, .. })
        ));
        assert!(matches!(
            parse_embeddings("embt 1 2 2\n1 2\n3 4 5\n"),
            Err(Error::Dimension {
                line: 3,
                expected: 2,
                found: 3
            })
        ));
        assert!(matches!(
            parse_embeddings("embt 2 1 1\n1\n"),
            Err(Error::FileFormat { line: 1, .. })
        ));
        assert!(matches!(
            parse_embeddings("matrix 1 1\n1\n"),
            Err(Error::FileFormat { line: 1, .. })
        ));
        assert!(matches!(
            parse_embeddings("embt 1 1 1\nabc\n"),
            Err(Error::FileFormat { line: 2, .. })
        ));
        assert!(matches!(
            parse_embeddings("embt 1 1 1\nNaN\n"),
            Err(Error::FileFormat { line: 2, .. })
        ));
    }

    #[test]
    fn embt_empty_body() {
        let m = parse_embeddings("embt 1 0 5\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (0, 5));
        assert_eq!(format_embeddings(&m), "embt 1 0 5\n");
    }

    #[test]
    fn token_json_round_trip() {
        let cfg = TokenCloudConfig {
            n: 4,
            v_range: (1, 3),
            l_range: (2, 5),
            dim: 3,
            gap: 1.0,
            noise: 1.0,
            center_std: 1.0,
        };
        let (v, _) = gen_token_clouds(&cfg, &mut RandomSource::new(9)).unwrap();
        let text = format_tokens(&v).unwrap();
        assert!(text.starts_with("[{\"id\":0,\"tokens\":[["));
        assert_eq!(parse_tokens(&text).unwrap(), v);
        assert!(parse_tokens("[{\"id\":0,\"tokens\":[]}]").is_err());
        assert!(parse_tokens("[{\"id\":0,\"tokens\":[[1.0]],\"x\":1}]").is_err());
    }
}
