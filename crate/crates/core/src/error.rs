use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{primitive}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        primitive: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{primitive}: expected {expected} input(s), got {got}")]
    Arity {
        primitive: &'static str,
        expected: &'static str,
        got: usize,
    },

    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),

    #[error("backward requires a 1x1 output, got {0:?}")]
    NonScalar((usize, usize)),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss during gradient check")]
    NonFiniteLoss,

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("{what}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("record `{record}`: {message}")]
    Record { record: String, message: String },

    #[error("record `{record}`: {kind} boundary ({start}, {len}) overflows {rows} feature rows")]
    BoundaryOverflow {
        record: String,
        kind: &'static str,
        start: usize,
        len: usize,
        rows: usize,
    },

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn record(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Record {
            record: record.into(),
            message: message.into(),
        }
    }
}
