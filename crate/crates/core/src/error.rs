use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// Variants are grouped by the CLI exit code they map to (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("wrong volume kind: {0}")]
    Kind(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("placement error: {0}")]
    Placement(String),

    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("value error: {0}")]
    Value(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage, 2 data/format, 3 numeric/contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Corrupt(_)
            | Error::Data(_)
            | Error::Dimension(_)
            | Error::Kind(_)
            | Error::Capacity(_)
            | Error::Placement(_) => 2,
            Error::Parameter(_)
            | Error::Value(_)
            | Error::Range(_)
            | Error::Bounds(_)
            | Error::Coverage(_)
            | Error::Contract(_)
            | Error::Numeric(_) => 3,
        }
    }
}
