use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid mask: row {row} has no active entry")]
    InvalidMask { row: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("corrupt index {index} (codebook size {size})")]
    CorruptIndex { index: u32, size: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("protocol error at layer {layer}: {detail}")]
    Protocol { layer: usize, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
