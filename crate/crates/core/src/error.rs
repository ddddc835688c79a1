use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: w={w}, b={b}")]
    TrainingDiverged { epoch: usize, w: f64, b: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("need at least {required} epochs, trace has {epochs}")]
    InsufficientTrace { epochs: usize, required: usize },

    #[error("degenerate division: bias did not move between epochs 0 and 1 (target {target:e})")]
    DegenerateDivision { target: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
