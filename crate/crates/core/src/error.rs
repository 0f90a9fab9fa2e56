//! Crate-wide error type. Variants map onto the CLI exit codes: user-facing
//! problems (config, data, I/O) exit 1, numeric aborts exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, violated invariants, bad flags.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument domain (size mismatch, non-positive std, unknown domain).
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset / manifest problem.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value encountered during numeric computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Flow step rejected: |det(I + Hessian)| below the singularity threshold.
    #[error("singular flow at step {step}: |det| = {det:e}")]
    SingularFlow { step: usize, det: f64 },

    /// Training aborted on a non-finite loss; `term` names the offending component.
    #[error("numeric abort at iteration {iteration}: {term} = {value}")]
    NumericAbort {
        iteration: usize,
        term: String,
        value: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors that should abort with exit code 2 (numeric failure)
    /// rather than 1 (user error).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::SingularFlow { .. } | Error::NumericAbort { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
