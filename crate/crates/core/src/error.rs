use thiserror::Error;

/// Errors produced by the estimators, losses, generators and trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm <= 1e-12")]
    ZeroNormRow { row: usize },

    #[error("vector has norm <= 1e-12")]
    ZeroNormVector,

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("sample set is empty")]
    EmptySet,

    #[error("pair count mismatch: {left} vs {right}")]
    PairCountMismatch { left: usize, right: usize },

    #[error("batch size mismatch: {left} vs {right}")]
    BatchSizeMismatch { left: usize, right: usize },

    #[error("row {row} is not unit norm (norm = {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("sample sets do not overlap under the kernel (cross mean is zero)")]
    NonOverlapping,

    #[error("token clouds of sample {sample} do not overlap under the kernel")]
    NonOverlappingTokens { sample: usize },

    #[error("correlation must satisfy |rho| < 1, got {0}")]
    InvalidCorrelation(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("quadrature did not converge (last change {change:e})")]
    QuadratureNotConverged { change: f64 },

    #[error("line {line}: {message}")]
    FileFormat { line: usize, message: String },

    #[error("line {line}: expected {expected} fields, found {found}")]
    Dimension { line: usize, expected: usize, found: usize },

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
