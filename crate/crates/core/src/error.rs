use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse { path: PathBuf, offset: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Shape { .. } | Error::NonScalarLoss(_) | Error::NonFinite(_) => 4,
        }
    }

    /// Short machine-readable category used in CLI failure lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
        }
    }
}
