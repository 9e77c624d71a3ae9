use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree along a named axis.
    #[error("dimension mismatch in {context}: axis `{axis}` expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch norm `{0}` has no running statistics; inference mode needs them")]
    UninitializedRunningStats(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 4]),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("bad file format: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("checkpoint does not match network: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(
        context: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    ) -> Self {
        Error::Dimension {
            context,
            axis,
            expected,
            found,
        }
    }
}
