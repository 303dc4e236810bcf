use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along named axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid model or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or out-of-range data (labels, files, geometry).
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value showed up where a finite one is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
