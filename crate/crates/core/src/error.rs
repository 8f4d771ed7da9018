use thiserror::Error;

use crate::stabilizer::Direction;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("entry array has {got} entries, expected {expected}")]
    BadShape { expected: usize, got: usize },

    #[error("matrix has a non-finite entry")]
    NonFinite,

    #[error("spectral norm iteration did not converge after {iterations} iterations (last relative change {last_change:e})")]
    NormNotConverged { iterations: usize, last_change: f64 },

    #[error("|mu| = {modulus} is not on the unit circle")]
    NotUnitScalar { modulus: f64 },

    #[error("invalid parameters: {0}")]
    InvalidSpec(String),

    #[error("bound {bound} is incompatible with {direction:?} iteration: {condition}")]
    IncompatibleBound {
        bound: String,
        direction: Direction,
        condition: String,
    },

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("{direction:?} stabilization diverged after {} steps", residuals.len())]
    Diverged {
        direction: Direction,
        residuals: Vec<f64>,
    },

    #[error("{direction:?} stabilization did not reach tolerance in {} steps", residuals.len())]
    NotConverged {
        direction: Direction,
        residuals: Vec<f64>,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
