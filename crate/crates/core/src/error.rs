use std::path::PathBuf;

use crate::autodiff::NonFiniteGradient;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("query ({x:.4}, {y:.4}) is outside the grid extent")]
    OutOfBounds { x: f64, y: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite state at step {step}; reduce dt")]
    NonFinite { step: usize },

    #[error("tape exceeded its budget of {budget_bytes} bytes")]
    TapeOverflow { budget_bytes: usize },

    #[error(transparent)]
    NonFiniteGradient(#[from] NonFiniteGradient),

    #[error("trajectories share no time range")]
    EmptyOverlap,

    #[error("mask selects no cells")]
    AllMasked,

    #[error("identification diverged at iteration {iteration} (loss {loss:.3e})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

impl Error {
    /// Numerical failures (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::TapeOverflow { .. }
                | Error::NonFiniteGradient(_)
                | Error::Diverged { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
