use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the degeneracy threshold")]
    ZeroVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("forward tape was already consumed by a backward pass")]
    TapeReused,

    #[error("label {label} out of range for {candidates} candidates")]
    LabelOutOfRange { label: usize, candidates: usize },

    #[error("class bank is empty")]
    EmptyBank,

    #[error("invalid simplex weights: {0}")]
    InvalidSimplex(String),

    #[error("loss ratio `{name}` must be positive, got {value}")]
    NonPositiveRatio { name: &'static str, value: f64 },

    #[error("gradient set is empty")]
    EmptyGradientSet,

    #[error("brute-force oracle supports at most 4 teachers, got {0}")]
    TooManyTeachers(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("strategy `{strategy}` requires teachers but {teachers} were supplied (expected {expected})")]
    StrategyTeacherMismatch {
        strategy: String,
        teachers: usize,
        expected: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported file format or version: {0}")]
    FormatVersionMismatch(String),

    #[error("checksum mismatch: file is truncated or corrupted")]
    ChecksumMismatch,

    #[error("malformed file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
