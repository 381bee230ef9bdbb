use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: String,
        expected: usize,
        actual: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate batch: train-mode batch norm needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unsupported merge: {0}")]
    UnsupportedMerge(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated file {path}: expected {expected} bytes, got {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("missing input artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Process exit codes by error category.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
            Error::Format(_)
            | Error::Truncated { .. }
            | Error::MissingArtifact(_)
            | Error::InsufficientData(_)
            | Error::LabelOutOfRange { .. }
            | Error::Io(_)
            | Error::Json(_) => EXIT_DATA,
            Error::NonFinite(_)
            | Error::Verification(_)
            | Error::Dimension { .. }
            | Error::Shape(_)
            | Error::DegenerateBatch(_)
            | Error::UnsupportedMerge(_) => EXIT_NUMERIC,
        }
    }

    pub(crate) fn dim(axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            actual,
        }
    }
}
