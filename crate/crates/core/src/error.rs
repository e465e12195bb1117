use glean_autograd::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum GleanError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

impl From<TensorError> for GleanError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape { op, detail } => GleanError::Shape(format!("{op}: {detail}")),
            TensorError::InvalidArgument(msg) => GleanError::InvalidArgument(msg),
        }
    }
}

impl From<serde_json::Error> for GleanError {
    fn from(e: serde_json::Error) -> Self {
        GleanError::Config(e.to_string())
    }
}

pub type Result<T, E = GleanError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> GleanError {
    GleanError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> GleanError {
    GleanError::Shape(msg.into())
}
