//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in `{op}`: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("all key positions are masked for at least one attention query set")]
    AllMasked,

    #[error("NaN gradient detected in parameter `{name}` at step {step}")]
    NanGradient { name: String, step: u64 },

    #[error("NaN loss at step {step}; last good checkpoint: {last_good}")]
    NanLoss { step: u64, last_good: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid distribution spec: {0}")]
    Spec(String),

    #[error("zero-variance column {column} cannot be standardized")]
    ZeroVariance { column: usize },

    #[error("quadrature did not converge: residual estimate {residual:.3e}")]
    QuadratureDiverged { residual: f64 },

    #[error("batch group {group} has a single member; bias not estimable")]
    SingletonGroup { group: usize },

    #[error("batch contains a single class; stratify the sampler")]
    SingleClassBatch,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },

    #[error("dataset file error at datapoint {index}: {detail}")]
    DatasetIo { index: usize, detail: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
