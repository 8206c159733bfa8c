use std::path::PathBuf;

/// CLI-level error with the exit-code mapping: usage problems exit 1, data
/// problems exit 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] dfmnet_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
