//! Crate-wide error type.

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by any layer of the stack, from tensor shape checks up to
/// training-loop divergence.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An index (class label, token id, expert id, ...) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A configuration violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an API contract (mismatched batches, consumed tape, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A dataset row failed to parse.
    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    /// A dataset file does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Diverged {
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// Two-cluster threshold fitting cannot separate identical values.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// A checkpoint file is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
