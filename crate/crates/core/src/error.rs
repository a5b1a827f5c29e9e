use thiserror::Error;

/// Errors raised by the numerical modules and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the arguments was violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A path left the region covered by an explicit noise field.
    #[error("path leaves the noise-field box (with margin) at t = {time} (step {step})")]
    Coverage { step: usize, time: f64 },

    /// An allocation estimate exceeded the configured cap.
    #[error("resource limit exceeded: {what} needs {required} bytes, cap is {cap} bytes")]
    Resource {
        what: String,
        required: u64,
        cap: u64,
    },

    /// Factorization or iteration failed.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Cholesky failed after the full jitter ladder.
    #[error("covariance factorization failed after jitter {jitter:e}; minimum eigenvalue {min_eigenvalue:e}")]
    Factorization { jitter: f64, min_eigenvalue: f64 },

    /// Malformed or inconsistent experiment configuration.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
