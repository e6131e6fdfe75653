use thiserror::Error;

/// Errors surfaced by the popularity-learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller handed us inconsistent dimensions, out-of-range parameters, etc.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Cholesky factorization failed even after the jitter ladder was exhausted.
    #[error("covariance factorization failed (final jitter tried: {final_jitter:e})")]
    CholeskyFailed { final_jitter: f64 },

    /// A numerical routine produced non-finite values it could not recover from.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The HMC chain diverged persistently.
    #[error("sampler failure: {0}")]
    Sampler(String),

    /// A scalar Newton solve ran out of iterations.
    #[error("Newton solve did not converge (|gradient| = {grad_magnitude:e} after {iterations} iterations)")]
    NonConvergence {
        grad_magnitude: f64,
        iterations: usize,
    },

    /// Malformed input data (CSV rows, headers, config values).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error")]
    Io(#[from] std::io::Error),

    #[error("csv error")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
