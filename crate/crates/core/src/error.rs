use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0:?} vs {1:?}")]
    GridMismatch(Vec<usize>, Vec<usize>),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("atom index {index} out of range for dictionary of size {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("grid dims {dims:?} not divisible by 2^{levels}")]
    Divisibility { dims: Vec<usize>, levels: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("infeasible model: {0}")]
    Infeasible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
