use thiserror::Error;

/// Errors raised anywhere in the nursing engine, testbed, harness or file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("corrupt data: {0}")]
    Corruption(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),
    #[error("scene specification error: {0}")]
    Spec(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Parameter(_) => "parameter",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Corruption(_) => "corruption",
            Error::Training(_) => "training",
            Error::DegenerateSchedule(_) => "degenerate-schedule",
            Error::Spec(_) => "spec",
            Error::Validation(_) => "validation",
            Error::Io(_) => "io",
        }
    }
}
