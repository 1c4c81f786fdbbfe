use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MhnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MhnError {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("empty sequence passed to {0}")]
    EmptySequence(&'static str),

    /// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model or run configuration. Carries the offending field names.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed on-disk data, with the byte offset where parsing failed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl MhnError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MhnError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MhnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        MhnError::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for contract/config failures, 2 for I/O or format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            MhnError::Format { .. } | MhnError::Io { .. } | MhnError::Json { .. } => 2,
            _ => 1,
        }
    }
}
