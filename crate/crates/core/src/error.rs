use std::io;
use std::path::PathBuf;

/// Broad failure classes, used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },

    #[error("malformed IDX file: {0}")]
    Idx(String),

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("trial history: {0}")]
    History(String),

    #[error("download: {0}")]
    Fetch(String),

    #[error("time budget of {0:.1}s exceeded")]
    TimeBudget(f64),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Idx(_) | Error::Labels(_) | Error::Fetch(_) | Error::Io { .. } => {
                ErrorClass::Data
            }
            _ => ErrorClass::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
