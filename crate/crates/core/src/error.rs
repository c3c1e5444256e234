use thiserror::Error;

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract. The message
    /// names the operation and the offending dimension.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A non-finite value (NaN or infinity) was found where finite data is
    /// required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (image, checkpoint, config, CSV).
    #[error("format error in {context}: {detail}")]
    Format { context: &'static str, detail: String },

    /// A precondition of the public API was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            context,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
