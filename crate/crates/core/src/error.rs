use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Each variant maps to a stable machine-readable code (see [`Error::code`])
/// which the command-line front end prints on stderr.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid thresholds: lo={lo} must be < hi={hi}, both in [0, 1]")]
    InvalidThresholds { lo: f64, hi: f64 },

    #[error("mask has no pixel at or above the foreground threshold")]
    NoForeground,

    #[error("mask has no pixel at or below the background threshold")]
    NoBackground,

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel count {channels} is not divisible by {groups} groups")]
    IndivisibleChannels { channels: usize, groups: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("value {value} at index {index} is outside [0, 1]")]
    Range { index: usize, value: f64 },

    #[error("format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("annotation has no labeled pixels")]
    NoLabeledPixels,

    #[error("invalid prompts: {0}")]
    InvalidPrompts(String),

    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable identifier used on the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidThresholds { .. } => "E_INVALID_THRESHOLDS",
            Error::NoForeground => "E_NO_FOREGROUND",
            Error::NoBackground => "E_NO_BACKGROUND",
            Error::DimensionMismatch { .. } => "E_DIMENSION_MISMATCH",
            Error::ShapeMismatch(_) => "E_SHAPE_MISMATCH",
            Error::IndivisibleChannels { .. } => "E_INDIVISIBLE_CHANNELS",
            Error::EmptyInput(_) => "E_EMPTY_INPUT",
            Error::Range { .. } => "E_RANGE",
            Error::Format { .. } => "E_FORMAT",
            Error::NoLabeledPixels => "E_NO_LABELED_PIXELS",
            Error::InvalidPrompts(_) => "E_INVALID_PROMPTS",
            Error::OracleFailure(_) => "E_ORACLE_FAILURE",
            Error::Config(_) => "E_CONFIG",
            Error::Io { .. } => "E_IO",
            Error::Json { .. } => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
