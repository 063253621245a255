use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Each variant maps onto a stable
/// machine-readable code via [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("series too short: need at least {needed} steps, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("sources are misaligned: {0}")]
    MisalignedSources(String),

    #[error("bad split fractions: {0}")]
    BadFractions(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("missing value in {file} at row {row}, column {column}")]
    MissingValue { file: String, row: usize, column: String },

    #[error("autoregressive coefficients unstable: spectral radius {radius} exceeds {bound}")]
    UnstableConfig { radius: f64, bound: f64 },

    #[error("calibration mean {0} is too close to zero for a multiplicative correction")]
    DegenerateMean(f64),

    #[error("calibration standard deviation {0} is too close to zero")]
    DegenerateStd(f64),

    #[error("quantile {0} is too close to zero for a multiplicative mapping")]
    DegenerateQuantile(f64),

    #[error("residual column {0} has zero variance")]
    DegenerateColumn(usize),

    #[error("latent fit is singular even after ridge regularization")]
    RankDeficient,

    #[error("latent sequence required but not supplied")]
    LatentMissing,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse failure in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Upper-snake code printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::SeriesTooShort { .. } => "SERIES_TOO_SHORT",
            Error::MisalignedSources(_) => "MISALIGNED_SOURCES",
            Error::BadFractions(_) => "BAD_FRACTIONS",
            Error::InvalidConfig(_) => "CONFIG_INVALID",
            Error::InvalidData(_) => "DATA_INVALID",
            Error::MissingValue { .. } => "MISSING_VALUE",
            Error::UnstableConfig { .. } => "UNSTABLE_CONFIG",
            Error::DegenerateMean(_) => "DEGENERATE_MEAN",
            Error::DegenerateStd(_) => "DEGENERATE_STD",
            Error::DegenerateQuantile(_) => "DEGENERATE_QUANTILE",
            Error::DegenerateColumn(_) => "DEGENERATE_COLUMN",
            Error::RankDeficient => "RANK_DEFICIENT",
            Error::LatentMissing => "LATENT_MISSING",
            Error::ShapeMismatch { .. } => "SHAPE_MISMATCH",
            Error::LengthMismatch { .. } => "LENGTH_MISMATCH",
            Error::EmptyInput => "EMPTY_INPUT",
            Error::NonFiniteLoss { .. } => "NON_FINITE_LOSS",
            Error::Io { .. } => "IO_FAILURE",
            Error::Parse { .. } => "PARSE_FAILURE",
        }
    }

    /// Process exit status class: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadFractions(_) | Error::InvalidConfig(_) | Error::UnstableConfig { .. } => 2,
            Error::SeriesTooShort { .. }
            | Error::MisalignedSources(_)
            | Error::InvalidData(_)
            | Error::MissingValue { .. }
            | Error::LatentMissing
            | Error::ShapeMismatch { .. }
            | Error::LengthMismatch { .. }
            | Error::EmptyInput
            | Error::Io { .. }
            | Error::Parse { .. } => 3,
            Error::DegenerateMean(_)
            | Error::DegenerateStd(_)
            | Error::DegenerateQuantile(_)
            | Error::DegenerateColumn(_)
            | Error::RankDeficient
            | Error::NonFiniteLoss { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
