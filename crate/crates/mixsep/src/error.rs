use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("covariance is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),

    #[error("mask support has {0} elements; use the Monte Carlo path")]
    SupportTooLarge(u128),

    #[error("did not converge: {0}")]
    NotConverged(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
