//! Crate-wide error type.

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shape disagreement in a numerics op.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid numerics usage that is not a shape problem.
    #[error("numerics error in {op}: {reason}")]
    Numerics { op: &'static str, reason: String },

    /// A token string that does not parse under the composite grammar.
    #[error("invalid token {raw:?}: {reason}")]
    Token { raw: String, reason: String },

    /// Vocabulary construction or lookup failure.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Bad configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with file position where known.
    #[error("data error at {path}:{line}: {reason}")]
    Data {
        path: String,
        line: usize,
        reason: String,
    },

    /// Model construction or checkpoint failure.
    #[error("model error: {0}")]
    Model(String),

    /// Training aborted or misconfigured.
    #[error("training error: {0}")]
    Training(String),

    /// Generation request that cannot be honored.
    #[error("generation error: {0}")]
    Generation(String),

    /// Statistical routine failure (degenerate input, non-convergence).
    #[error("stats error: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
