use bvpo_core::CoreError;
use thiserror::Error;

/// CLI errors mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("enumeration too large: {0}")]
    Enumeration(String),
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 0 success, 1 config error, 2 enumeration-size error, 3 numerical abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Enumeration(_) => 2,
            CliError::NumericalAbort(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        match err {
            CoreError::EnumerationTooLarge { .. } => CliError::Enumeration(err.to_string()),
            CoreError::NonFinite(_) => CliError::NumericalAbort(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
