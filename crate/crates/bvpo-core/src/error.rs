use thiserror::Error;

/// Errors shared across the laboratory modules.
#[derive(Debug, Clone, Error)]
pub enum CoreError {
    #[error("{what} index {got} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("enumeration too large: {cells} cells exceeds guard {limit}")]
    EnumerationTooLarge { cells: usize, limit: usize },
    #[error("datasets are not prompt-paired")]
    UnpairedDatasets,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
