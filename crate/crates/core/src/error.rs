use std::path::PathBuf;

/// Errors raised by the merging toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("tensor `{name}`: shape {shape:?} needs {expected} bytes, found {actual}")]
    ByteLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}`: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("archives are not aligned: {0}")]
    Misaligned(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("coefficient set is empty: no transformer-layer parameters found")]
    EmptyCoefficientSet,
    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the filesystem or the on-disk format, as opposed to
    /// semantic validation failures.
    pub fn is_io_or_format(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::ByteLength { .. }
                | Error::NonFinite { .. }
                | Error::DuplicateName(_)
                | Error::Json(_)
                | Error::Schema(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
