use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the navigation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched dimensions, bad hyperparameters, invalid scenario settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// A non-finite value showed up where a finite one was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Empty or otherwise unusable input data.
    #[error("input error: {0}")]
    Input(String),

    #[error("pose ({x:.3}, {y:.3}) is outside the terrain bounds")]
    OutOfBounds { x: f64, y: f64 },

    #[error("slope angle {0:.6} rad is at or beyond the vertical")]
    DegenerateSlope(f64),

    #[error("elevation change {dz} with zero planar displacement")]
    DegenerateMotion { dz: f64 },

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Training produced non-finite values; carries the last good parameters.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        last_good: Box<crate::diffmath::Checkpoint>,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
