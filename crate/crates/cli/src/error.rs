use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dbc_core::Error),

    #[error("path does not exist: {0}")]
    ConfigPath(PathBuf),

    #[error("cannot parse config {path}: {message}")]
    ConfigParse { path: String, message: String },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("{0}")]
    Usage(String),

    /// Help or version text requested; not a failure.
    #[error("{0}")]
    Help(String),

    #[error("stage `{stage}` needs `{needs}` to run first in {dir}")]
    StageMissing { stage: &'static str, needs: &'static str, dir: PathBuf },

    #[error("{dir} holds a run with configuration hash {found}, this run has {expected}; pick another --out")]
    RunConflict { dir: PathBuf, found: String, expected: String },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::ConfigPath(_) => "CONFIG_PATH",
            CliError::ConfigParse { .. } => "CONFIG_PARSE",
            CliError::ConfigInvalid(_) => "CONFIG_INVALID",
            CliError::Usage(_) => "USAGE",
            CliError::Help(_) => "HELP",
            CliError::StageMissing { .. } => "STAGE_MISSING",
            CliError::RunConflict { .. } => "RUN_CONFLICT",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => e.exit_code(),
            CliError::Help(_) => 0,
            CliError::StageMissing { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Core(dbc_core::Error::Io { path, source })
}

pub(crate) fn parse_err(path: impl Into<PathBuf>) -> impl FnOnce(String) -> CliError {
    let path = path.into();
    move |message| CliError::Core(dbc_core::Error::Parse { path, message })
}
