use std::path::PathBuf;
use thiserror::Error;

/// Library error taxonomy. The CLI maps variants onto process exit
/// codes: configuration -> 2, numerical -> 3, ingestion and I/O -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or a violated call precondition.
    #[error("configuration: {0}")]
    Config(String),

    /// Numerical failure (non-finite values, no convergence).
    #[error("numerical: {0}")]
    Numerical(String),

    /// Malformed input data (file contents, not file access).
    #[error("data format: {0}")]
    Ingestion(String),

    /// Filesystem failure.
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
