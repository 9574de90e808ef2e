//! Error taxonomy shared across the crate.
//!
//! The four variants map one-to-one onto the CLI exit codes: configuration
//! errors (2), shape errors (2), data errors (3) and numeric divergence (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad schedule, even context length, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Array dimensions do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),
    /// Corrupt, truncated or inconsistent persisted data.
    #[error("data error: {0}")]
    Data(String),
    /// A forward pass or loss produced NaN/Inf.
    #[error("numeric divergence: {0}")]
    Numeric(String),
    /// Underlying IO failure while reading/writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Outcome of a training loop. On numeric divergence the loop stops and hands
/// back the last finite state so callers can still persist a checkpoint.
#[derive(Debug, Clone)]
pub enum TrainEnd<T> {
    Completed(T),
    Diverged { state: T, step: usize },
}

impl<T> TrainEnd<T> {
    /// The carried state, whether or not training completed.
    pub fn state(&self) -> &T {
        match self {
            TrainEnd::Completed(s) => s,
            TrainEnd::Diverged { state, .. } => state,
        }
    }

    pub fn into_state(self) -> T {
        match self {
            TrainEnd::Completed(s) => s,
            TrainEnd::Diverged { state, .. } => state,
        }
    }

    pub fn completed(&self) -> bool {
        matches!(self, TrainEnd::Completed(_))
    }

    /// Treat divergence as an error, keeping only completed states.
    pub fn into_result(self) -> Result<T> {
        match self {
            TrainEnd::Completed(s) => Ok(s),
            TrainEnd::Diverged { step, .. } => {
                Err(Error::numeric(format!("training diverged at step {step}")))
            }
        }
    }
}
