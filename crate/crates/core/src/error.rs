use thiserror::Error;

#[derive(Debug, Error)]
pub enum SlsError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("horizon mismatch in {context}: expected {expected}, got {actual}")]
    HorizonMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("operator is not strictly causal ({context}): deviation {deviation:e}")]
    NotStrictlyCausal { context: &'static str, deviation: f64 },

    #[error("controller step out of order: expected t = {expected}, got t = {actual}")]
    OutOfOrder { expected: usize, actual: usize },

    #[error("FIR synthesis infeasible for disturbance injected at h = {h}: constraint violation {violation:e}")]
    Infeasible { h: usize, violation: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("selector family does not partition the identity: deviation {0:e}")]
    PartitionViolation(f64),

    #[error("containment violated: {0}")]
    Containment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SlsError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SlsError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
