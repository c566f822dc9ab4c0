use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("propagation error: {0}")]
    Propagation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid config: {field}: {msg}")]
    Config { field: String, msg: String },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at iteration {iteration} ({during})")]
    NonFiniteLoss { iteration: usize, during: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
