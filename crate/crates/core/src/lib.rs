//! Distributional alignment of paired embeddings.
//!
//! The crate provides a kernel-density Cauchy–Schwarz (CS) divergence
//! estimator between two sample sets, the symmetric InfoNCE loss, their
//! combination as an alignment objective with analytic gradients, a
//! per-sample token variant, closed-form Gaussian references, synthetic data
//! with a controllable modality gap, and a small adapter trainer.
//!
//! ```
//! use csalign_core::{cs_divergence, EmbeddingMatrix, KernelParams};
//!
//! let x = EmbeddingMatrix::from_rows(&[[0.0]]).unwrap();
//! let y = EmbeddingMatrix::from_rows(&[[2.0]]).unwrap();
//! let d = cs_divergence(&x, &y, KernelParams::default()).unwrap();
//! assert!((d.value().unwrap() - 4.0).abs() < 1e-12);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod datagen;
pub mod divergence;
pub mod error;
pub mod exact_sum;
pub mod gradients;
pub mod kernels;
pub mod losses;
pub mod numerics;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use analytic::{
    cs_gaussian_closed_form, cs_gaussian_population, kl_gaussian_1d, mi_gaussian, toy_example_report, ToyReport,
};
pub use datagen::{
    gen_multi_caption, gen_paired, gen_token_clouds, gen_token_clouds_along, gen_unpaired, read_embeddings,
    read_tokens, write_embeddings, write_tokens, MultiCaptionDataset, PairedDataset, SyntheticConfig, TokenCloudConfig,
    UnpairedPool,
};
pub use divergence::{cs_divergence, cs_divergence_rkhs, token_cs_loss, DivergenceValue, TokenBatch};
pub use error::{Error, Result};
pub use gradients::{
    finite_difference_check, grad_cs, grad_infonce, grad_normalize_chain, grad_objective, grad_token_cs,
    GradCheckReport, GradProblem, GradientPair, LossId,
};
pub use kernels::{gaussian_kernel, gram_stats, GramStats, KernelParams};
pub use losses::{cs_aligner_objective, decomposed_objective, infonce, LossConfig, LossReport};
pub use numerics::{l2_normalize_rows, EmbeddingMatrix, GaussianSpec, RandomSource};
pub use trainer::{
    adapter_forward, evaluate_retrieval, sweep, train, AdaptSide, AdapterKind, AdapterParams, MetricsRow, Regime,
    SweepGrid, SweepRow, TrainConfig, TrainExtras, TrainOutcome,
};
