use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape/dimension disagreement between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid argument values (negative std, empty tensor, bad label, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation called in an invalid state (e.g. backward without forward).
    #[error("state error: {0}")]
    State(String),

    /// Dataset file missing, truncated or malformed.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// Configuration file problems.
    #[error("config error: {0}")]
    Config(String),

    /// The training loss became non-finite or blew past the divergence bound.
    #[error("diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
