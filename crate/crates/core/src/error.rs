use std::fmt;

use crate::sparse::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised by the collective transports.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("{op} timed out after {secs:.1}s waiting for ranks {missing:?}")]
    Timeout {
        op: &'static str,
        secs: f64,
        missing: Vec<usize>,
    },
    #[error("peer rank {rank} disconnected: {detail}")]
    Disconnected { rank: usize, detail: String },
    #[error("protocol error with rank {rank}: {detail}")]
    Protocol { rank: usize, detail: String },
    #[error("connection setup failed: {0}")]
    Setup(String),
}

/// Dataset parsing failures; every variant carries its 1-based line number
/// where one applies.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("missing header line")]
    MissingHeader,
    #[error("line {line}: malformed header: {detail}")]
    BadHeader { line: usize, detail: String },
    #[error("line {line}: non-numeric field {field:?}")]
    NonNumeric { line: usize, field: String },
    #[error("line {line}: feature index {index} out of range for dimension {dim}")]
    FeatureOutOfRange { line: usize, index: u64, dim: usize },
    #[error("line {line}: label {label} out of range for label dimension {dim}")]
    LabelOutOfRange { line: usize, label: u64, dim: usize },
    #[error("line {line}: duplicate feature index {index}")]
    DuplicateIndex { line: usize, index: u32 },
    #[error("header declares {expected} points but {found} records were read")]
    CountMismatch { expected: usize, found: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("invalid record: {0}")]
    Record(#[from] Violation),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(#[from] TransportError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn input(msg: impl fmt::Display) -> Self {
        Error::Input(msg.to_string())
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }

    pub fn checkpoint(msg: impl fmt::Display) -> Self {
        Error::Checkpoint(msg.to_string())
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport(_) => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) | Error::Invariant(_) => 1,
            _ => 2,
        }
    }
}
