use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    #[error("graph input `{0}` is not bound")]
    MissingInput(String),

    #[error("unknown graph output `{0}`")]
    UnknownOutput(String),

    #[error("backward called before forward")]
    NotEvaluated,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown dataset `{name}` (valid: {valid})")]
    UnknownDataset { name: String, valid: String },

    #[error("config error for `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Divergence { iter: u64, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }

    /// Process exit status: 2 for divergence, 3 for I/O and checkpoint
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 2,
            Error::Io(_) | Error::Checkpoint(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
