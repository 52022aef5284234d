use thiserror::Error;

/// Errors produced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {context} at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        context: String,
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("retrieval returned no eligible memories: {0}")]
    RetrievalEmpty(String),

    #[error("matching capacity exceeded: {queries} queries for {parts} ground-truth parts")]
    Capacity { queries: usize, parts: usize },

    #[error("invalid pairing: {0}")]
    InvalidPairing(String),

    #[error("invalid memory: {0}")]
    InvalidMemory(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
