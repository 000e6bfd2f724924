use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
///
/// Variants are grouped by the exit-code classes used by the command line:
/// configuration problems, data problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid registry: {0}")]
    Registry(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("unknown dataset `{name}` (registry has: {known})")]
    UnknownDataset { name: String, known: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Error class, mapped to process exit codes by the CLI.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Registry(_) | Error::UnknownDataset { .. } => {
                ErrorKind::Config
            }
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Tensor(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

pub type Result<T> = std::result::Result<T, Error>;
