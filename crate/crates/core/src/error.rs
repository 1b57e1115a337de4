use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Feature count entering `layer` does not match its declared width.
    #[error("dimension mismatch at layer {layer}: expected {expected} features, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A cache, state or handle was used with a model it does not belong to.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values in {tensor}")]
    NonFinite { tensor: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {message}")]
    Training {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("numeric failure at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
