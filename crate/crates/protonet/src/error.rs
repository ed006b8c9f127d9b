//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not compose (matmul inner dims, elementwise, channels...).
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input outside the mathematical domain of an operation (log of a
    /// non-positive value, sqrt of a negative, non-positive entropy argument).
    #[error("numeric domain violation in {op}: {detail}")]
    NumericDomain { op: &'static str, detail: String },

    /// Batch statistics need at least two rows.
    #[error("batch of size {got} too small for {op} (need >= {need})")]
    BatchSize {
        op: &'static str,
        got: usize,
        need: usize,
    },

    /// A caller broke an API contract (non-scalar loss, empty support set,
    /// zero mixture weight, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A sampling request exceeds what the data can provide.
    #[error("insufficient data: {detail}")]
    InsufficientData { detail: String },

    /// Input that makes the operation meaningless (zero vector under cosine,
    /// zero-norm embedding under unit normalization).
    #[error("degenerate input in {op}: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    /// The operation is not defined for this configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Dataset / checkpoint / config loading failure, naming the offender.
    #[error("load error for {entry}: {detail}")]
    Load { entry: String, detail: String },

    /// Training produced a non-finite value.
    #[error("numeric divergence at episode {episode}: {detail}")]
    Divergence { episode: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
