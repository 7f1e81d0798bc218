use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible extents. The message carries every shape involved.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// NaN or infinity produced by a forward kernel.
    #[error("non-finite value produced by {op} at flat index {index}")]
    Numeric { op: &'static str, index: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// Missing or inconsistent runtime state (running statistics, optimizer moments).
    #[error("state error: {0}")]
    State(String),

    /// Caller broke an API contract (non-scalar loss, nondeterministic fragment, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint mismatch:\n{}", .0.join("\n"))]
    Mismatch(Vec<String>),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
