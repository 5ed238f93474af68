use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("feature tap `{0}` is not available for this architecture")]
    UnsupportedTap(&'static str),
    #[error("unsupported input: {0}")]
    UnsupportedInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
