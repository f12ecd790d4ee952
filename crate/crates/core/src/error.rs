use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index out of range in {op}: {index} >= {bound}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{file}: {detail}")]
    Ingest { file: PathBuf, detail: String },

    #[error("{file}:{line}: {detail}")]
    Malformed {
        file: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing gradient for registered parameter `{0}`")]
    MissingGrad(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn ingest(file: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Ingest {
            file: file.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by input data (missing files, malformed lines).
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Ingest { .. } | Error::Malformed { .. })
    }
}
