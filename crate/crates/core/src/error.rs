//! Crate-wide error type and result alias.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not satisfy an operation's contract.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A non-finite value (NaN or Inf) was produced.
    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },

    /// An argument violates a precondition (bad threshold, empty input, ...).
    #[error("{0}")]
    InvalidInput(String),

    /// A persisted file failed validation (bad magic, version, truncation).
    #[error("corrupt file {path:?}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn corrupt(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/corruption, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::Corrupt { .. } | Error::Io { .. } | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
