//! Crate-wide error surface. Non-finite values are always an error, never a value.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("matrix is not positive definite: pivot {index} has value {value:.6e}")]
    NotSpd { index: usize, value: f64 },

    #[error("matrix is rank deficient: min/max singular value ratio {ratio:.3e} below {tol:.1e}")]
    RankDeficient { ratio: f64, tol: f64 },

    #[error("zero matrix passed to {0}")]
    ZeroMatrix(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible task spec: {0}")]
    Task(String),

    #[error("optimizer misuse: {0}")]
    Optim(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("cache inconsistent with forward: max deviation {max_dev:.3e} exceeds {tol:.1e}")]
    CacheMismatch { max_dev: f64, tol: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tensor container: {0}")]
    Format(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
