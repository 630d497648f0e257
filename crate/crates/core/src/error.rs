use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },

    #[error("schedule inconsistency at t={t}: g^2 = {g2}")]
    ScheduleInconsistency { t: f64, g2: f64 },

    #[error("infeasible grid: {0}")]
    InfeasibleGrid(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("mixing field reaches 1 at t={t}; start sampling from the truncated initialisation instead")]
    Singularity { t: usize },

    #[error("score undefined at t={t} (sigma = 0)")]
    UndefinedScore { t: usize },

    #[error("path violates constraint: {0}")]
    ConstraintViolation(String),

    #[error("non-finite loss {loss} at step {step} (t={t})")]
    NonFiniteLoss { step: usize, t: usize, loss: f64 },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn dims(expected: &[usize], got: &[usize]) -> Self {
        Error::Dimension {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
