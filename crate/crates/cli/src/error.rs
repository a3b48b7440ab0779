use std::path::PathBuf;

use mtkd_core::Error as CoreError;
use thiserror::Error;

#[derive(Clone, Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    ConfigParse(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error in run {run}: {message}")]
    Numeric { run: String, message: String },
    #[error("no completed runs found under {}", .0.display())]
    NoRunsFound(PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigParse(_) => 2,
            CliError::Data(_) | CliError::NoRunsFound(_) => 3,
            CliError::Numeric { .. } => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::ConfigParse(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    /// Maps a library error onto the exit-code classes; `run` names the
    /// failing (grid point, seed) when there is one.
    pub fn from_core(err: CoreError, run: Option<&str>) -> Self {
        match err {
            CoreError::InvalidConfig { .. }
            | CoreError::NonPositiveRatio { .. }
            | CoreError::NonPositiveTemperature(_)
            | CoreError::StrategyTeacherMismatch { .. }
            | CoreError::TooManyTeachers(_) => CliError::ConfigParse(err.to_string()),
            CoreError::Io { .. }
            | CoreError::FormatVersionMismatch(_)
            | CoreError::ChecksumMismatch
            | CoreError::Malformed(_)
            | CoreError::InvalidSpec(_) => CliError::Data(err.to_string()),
            other => CliError::Numeric {
                run: run.unwrap_or("setup").to_string(),
                message: other.to_string(),
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
