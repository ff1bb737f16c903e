use thiserror::Error;

/// Errors raised anywhere in the sampler, trainer, or verification harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid sparsity: {0}")]
    InvalidSparsity(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("mask violation: {0}")]
    MaskViolation(String),

    #[error("step budget exceeded: {0}")]
    Budget(String),

    #[error("enumeration too large: {count} terminal states exceed cap {cap}")]
    EnumerationTooLarge { count: u128, cap: u128 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint corrupted: {0}")]
    Corrupted(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
