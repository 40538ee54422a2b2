use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("point outside the problem domain: {0}")]
    OutOfBounds(String),

    #[error("unknown problem: {0}")]
    UnknownProblem(String),

    #[error("degenerate domain: could not realize a full-rank design in {0} attempts")]
    DegenerateDesign(usize),

    #[error("surrogate is not ready: rank condition not yet satisfied")]
    NotReady,

    #[error("duplicate point rejected (within {0:e} of an existing point)")]
    DuplicatePoint(f64),

    #[error("non-finite function value rejected")]
    NonFiniteValue,

    #[error("regularization cannot be changed after the factorization exists")]
    RegularizationFrozen,

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unknown evaluation record id {0}")]
    UnknownRecord(u64),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("speedup analysis error: {0}")]
    Speedup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
