use thiserror::Error;

use crate::saddle::SaddlePoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("no convergence after {iterations} iterations, residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("saddle solve did not converge, residual {residual:e} at best point")]
    SaddleNonConvergence { best: Box<SaddlePoint>, residual: f64 },

    #[error("saddle solve unbounded along {axis} after {expansions} box expansions")]
    Unbounded { axis: &'static str, expansions: usize },

    #[error("derivative methods disagree: relative gap {gap:e}")]
    Inconsistency { gap: f64 },

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("{failed} of {total} trials failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
