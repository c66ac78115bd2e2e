use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the mapping engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point component {value} on axis {axis} outside scene bounds [{min}, {max}]")]
    OutOfBounds {
        axis: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("frame has no points left")]
    EmptyFrame,
    #[error("no points inside the instance box")]
    EmptyInstance,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: u64 },
    #[error("latent code produced an empty surface")]
    DegenerateCode,
    #[error("input error at {path}: {reason}")]
    Input { path: PathBuf, reason: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn input(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable category, used by the CLI for exit codes and
    /// one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. }
            | Error::EmptyFrame
            | Error::EmptyInstance
            | Error::Parameter(_)
            | Error::State(_)
            | Error::Format(_)
            | Error::Input { .. }
            | Error::Config(_) => "input",
            Error::NonFinite { .. } | Error::DegenerateCode => "numerical",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
