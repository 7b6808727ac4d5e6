use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no events in risk computation")]
    NoEvents,

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("encoder used before fit")]
    NotFitted,

    #[error("column '{0}' has zero variance in the training split")]
    ZeroVariance(String),

    #[error("unknown column '{0}'")]
    UnknownColumn(String),

    #[error("feature schema mismatch: {0}")]
    Schema(String),

    /// Malformed input file content. `location` is a human readable
    /// "row 5, column delta" or "line 12" style position.
    #[error("{}: {location}: {message}", path.display())]
    Data {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(
        path: impl Into<PathBuf>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Data {
            path: path.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// True when the error stems from user-supplied input (files, config,
    /// arguments) rather than from a failure during computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::UnknownColumn(_)
                | Error::Schema(_)
                | Error::Data { .. }
                | Error::Io { .. }
                | Error::Config(_)
                | Error::Checkpoint(_)
        )
    }
}
