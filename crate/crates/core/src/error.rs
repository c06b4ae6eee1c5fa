use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("class has no tokens")]
    EmptyClass,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("covariance is degenerate (fewer than two samples)")]
    DegenerateCovariance,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("not an EDRF file")]
    NotEdrf,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("split infeasible: {0}")]
    SplitInfeasible(String),

    #[error("empty corpus")]
    EmptyCorpus,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 invalid input, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateCovariance | Error::NumericalFailure(_) => 2,
            Error::Io(_) => 3,
            _ => 1,
        }
    }
}
