use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("state space of {states} states exceeds the cap of {cap}")]
    StateSpaceTooLarge { states: u128, cap: usize },
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("configuration does not cover collar site {0:?}")]
    MissingCollar(Vec<i32>),
    #[error("step size violates the stability bound: {0}")]
    Stability(String),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
