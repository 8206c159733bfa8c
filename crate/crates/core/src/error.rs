use std::path::PathBuf;

/// Errors produced by the tensor engine, the model and the I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical error: {0}")]
    NumericalError(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward called with an empty tape")]
    EmptyTape,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("pair set is empty")]
    EmptySet,

    #[error("input mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("corrupt weight file: {0}")]
    CorruptFile(String),

    #[error("unknown weight file version {0}")]
    UnknownVersion(u16),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
