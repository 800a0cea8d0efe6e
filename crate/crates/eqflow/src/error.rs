use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, empty schedules, malformed specs).
    #[error("configuration error: {0}")]
    Config(String),

    /// A vector or matrix had the wrong length for the operation.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A non-finite value appeared where the contract requires finite input.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Optimizer received non-finite gradients; the step was rejected.
    #[error("divergence: non-finite gradient at step {step}")]
    Divergence { step: u64 },

    /// Checkpoint or record stream is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// An operation that requires data got none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// The posterior-field oracle has no mass at the queried point.
    #[error("oracle undefined at query point: {0}")]
    OracleUndefined(String),

    /// Failure inside one item of a batched operation.
    #[error("batch item {index}: {source}")]
    BatchItem {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
