//! JSON run configuration: data source, loss, training schedule, extras and
//! an optional sweep grid. Unknown keys are rejected; errors carry the key
//! path.

use std::path::{Path, PathBuf};

use csalign_core::datagen::{gap_direction, Provenance};
use csalign_core::{
    gen_multi_caption, gen_paired, gen_token_clouds, gen_token_clouds_along, gen_unpaired, read_embeddings, AdaptSide,
    AdapterKind, LossConfig, PairedDataset, RandomSource, Regime, SweepGrid, SyntheticConfig, TokenCloudConfig,
    TrainConfig, TrainExtras,
};
use serde::Deserialize;

use crate::CliError;

const CAPTION_STREAM: u64 = 16;
const TOKEN_STREAM: u64 = 17;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub regime: Regime,
    pub data: DataSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub extras: Option<ExtrasSection>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSection {
    Synthetic(SyntheticConfig),
    Files { x: PathBuf, y: PathBuf },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            tau: d.tau,
            lambda: d.lambda,
            alpha: d.alpha,
            sigma: d.sigma,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adapt_side: AdaptSide,
    pub eval_fraction: f64,
    pub seed: u64,
    pub adapter: AdapterKind,
    pub token_weight: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adapt_side: d.adapt_side,
            eval_fraction: d.eval_fraction,
            seed: d.seed,
            adapter: d.adapter,
            token_weight: d.token_weight,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum ExtrasSection {
    Unpaired { m_x: usize, m_y: usize },
    Captions { k: usize, noise: f64 },
    Tokens(TokenSection),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSection {
    pub n: usize,
    pub v_range: (usize, usize),
    pub l_range: (usize, usize),
    pub gap: f64,
    #[serde(default = "one")]
    pub noise: f64,
    #[serde(default = "one")]
    pub center_std: f64,
    /// Offset text tokens along the synthetic data's gap direction.
    #[serde(default)]
    pub follow_data_gap: bool,
    /// Defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}

/// Everything a training run needs, resolved from a config file.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub train: TrainConfig,
    pub data: PairedDataset,
    pub extras: TrainExtras,
    pub sweep: SweepGrid,
}

pub fn parse_config(text: &str) -> Result<RunConfigFile, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::usage(format!("config error at `{path}`: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<RunConfigFile, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn config_error(section: &str, err: csalign_core::Error) -> CliError {
    CliError::usage(format!("config error in `{section}`: {err}"))
}

impl RunConfigFile {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            regime: self.regime,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            loss: LossConfig {
                tau: self.loss.tau,
                lambda: self.loss.lambda,
                alpha: self.loss.alpha,
                sigma: self.loss.sigma,
            },
            adapt_side: self.train.adapt_side,
            seed: self.train.seed,
            eval_fraction: self.train.eval_fraction,
            adapter: self.train.adapter,
            token_weight: self.train.token_weight,
        }
    }

    /// Builds data and extras. Relative file paths resolve against `base_dir`.
    pub fn plan(&self, base_dir: &Path) -> Result<RunPlan, CliError> {
        let train = self.train_config();
        train.validate().map_err(|e| config_error("train", e))?;

        let data = match &self.data {
            DataSection::Synthetic(s) => gen_paired(s).map_err(|e| config_error("data.synthetic", e))?,
            DataSection::Files { x, y } => {
                let (px, py) = (base_dir.join(x), base_dir.join(y));
                let read = |p: &Path| {
                    read_embeddings(p).map_err(|e| CliError::usage(format!("cannot load {}: {e}", p.display())))
                };
                PairedDataset::new(read(&px)?, read(&py)?, Provenance::Files { x: px, y: py })
                    .map_err(|e| config_error("data.files", e))?
            }
        };

        let synthetic = match &self.data {
            DataSection::Synthetic(s) => Some(s),
            DataSection::Files { .. } => None,
        };
        let extras = match &self.extras {
            None => TrainExtras::None,
            Some(ExtrasSection::Unpaired { m_x, m_y }) => {
                let s = synthetic.ok_or_else(|| {
                    CliError::usage("config error at `extras.unpaired`: requires synthetic data".into())
                })?;
                TrainExtras::Unpaired(gen_unpaired(s, *m_x, *m_y).map_err(|e| config_error("extras.unpaired", e))?)
            }
            Some(ExtrasSection::Captions { k, noise }) => {
                let mut rng = RandomSource::with_stream(train.seed, CAPTION_STREAM);
                TrainExtras::MultiCaption(
                    gen_multi_caption(&data, *k, *noise, &mut rng).map_err(|e| config_error("extras.captions", e))?,
                )
            }
            Some(ExtrasSection::Tokens(t)) => {
                let cfg = TokenCloudConfig {
                    n: t.n,
                    v_range: t.v_range,
                    l_range: t.l_range,
                    dim: data.dim(),
                    gap: t.gap,
                    noise: t.noise,
                    center_std: t.center_std,
                };
                let mut rng = RandomSource::with_stream(t.seed.unwrap_or(train.seed), TOKEN_STREAM);
                let clouds = if t.follow_data_gap {
                    let s = synthetic.ok_or_else(|| {
                        CliError::usage(
                            "config error at `extras.tokens.follow_data_gap`: requires synthetic data".into(),
                        )
                    })?;
                    let g = gap_direction(s).map_err(|e| config_error("data.synthetic", e))?;
                    gen_token_clouds_along(&cfg, &g, &mut rng)
                } else {
                    gen_token_clouds(&cfg, &mut rng)
                };
                let (vision, text) = clouds.map_err(|e| config_error("extras.tokens", e))?;
                TrainExtras::Tokens { vision, text }
            }
        };

        Ok(RunPlan {
            train,
            data,
            extras,
            sweep: self.sweep.clone().unwrap_or_default(),
        })
    }
}
