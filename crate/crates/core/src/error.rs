use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by frontends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, flags, or model text.
    Usage,
    /// Malformed or inconsistent input data.
    Data,
    /// A solver or decomposition failed.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("no data: {0}")]
    Empty(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model parse error at offset {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error("statistics for dimension `{dimension}` are stale (matrix version {matrix}, stats version {stats})")]
    StaleStatistics {
        dimension: String,
        matrix: u64,
        stats: u64,
    },

    #[error("solver failed for dimension `{dimension}`, entity {entity}: {message}")]
    Solver {
        dimension: String,
        entity: usize,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dataspace has {cells} cells, above the enumeration limit of {limit}")]
    EnumerationGuard { cells: u128, limit: u128 },

    #[error("divergence undefined: {0}")]
    Divergence(String),

    #[error("mixing matrix error: {0}")]
    Mixing(String),

    #[error("model file error: {0}")]
    Format(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Validation(_) => ErrorKind::Usage,
            Error::StaleStatistics { .. }
            | Error::Solver { .. }
            | Error::Numerical(_)
            | Error::Divergence(_) => ErrorKind::Numerical,
            Error::Io { .. }
            | Error::Schema(_)
            | Error::Row { .. }
            | Error::Empty(_)
            | Error::EnumerationGuard { .. }
            | Error::Mixing(_)
            | Error::Format(_) => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
