use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty series")]
    EmptySeries,

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} out of range [0, {limit})")]
    TokenOutOfRange { token: usize, limit: usize },

    #[error("probability vector is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("all positions are masked")]
    AllMasked,

    #[error("series of length {len} is too short: {reason}")]
    TooShort { len: usize, reason: String },

    #[error("degenerate scaling series")]
    DegenerateScaling,

    #[error("zero-denominator target")]
    ZeroDenominator,

    #[error("nonpositive score {value} for '{id}'")]
    NonPositiveScore { id: String, value: f64 },

    #[error("dataset ids differ between reports: {0}")]
    MismatchedDatasets(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, used by the CLI for error reporting
    /// and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Diverged { .. } => "numeric",
            Error::EmptySeries
            | Error::NonFinite { .. }
            | Error::TooShort { .. }
            | Error::DegenerateScaling
            | Error::ZeroDenominator
            | Error::MismatchedDatasets(_) => "data",
            Error::TokenOutOfRange { .. }
            | Error::NotNormalized { .. }
            | Error::Shape(_)
            | Error::AllMasked
            | Error::NonPositiveScore { .. } => "input",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
