use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    /// Carries the last parameters that produced a finite loss.
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged {
        epoch: usize,
        msg: String,
        last_good: Box<crate::autodiff::ParamStore>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
