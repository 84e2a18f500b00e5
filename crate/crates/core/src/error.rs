use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ZslError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ZslError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {message} (condition estimate {condition:.3e})")]
    Numerical { message: String, condition: f64 },

    #[error("split {split_id}: {source}")]
    Split {
        split_id: usize,
        #[source]
        source: Box<ZslError>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ZslError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ZslError::Io { path: path.into(), source }
    }

    /// Coarse category used by front ends to pick an exit status.
    pub fn kind(&self) -> ErrorKind {
        match self {
            ZslError::Param(_) => ErrorKind::Config,
            ZslError::Numerical { .. } => ErrorKind::Numerical,
            ZslError::Split { source, .. } => source.kind(),
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
