use thiserror::Error;

/// Errors raised by the estimation, channel and policy routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid channel parameters: {0}")]
    InvalidChannel(String),

    #[error("invalid system model: {0}")]
    InvalidModel(String),

    #[error("power {power} is not in the power set of sensor {sensor}")]
    InvalidAction { sensor: usize, power: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),

    #[error("closed form unavailable: {0}")]
    ClosedFormUnavailable(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("value iteration did not converge after {iterations} iterations (last delta {delta:e})")]
    NotConverged { iterations: usize, delta: f64 },

    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("policy table parse error at line {line}: {reason}")]
    TableParse { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
