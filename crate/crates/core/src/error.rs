use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value violates its invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Caller broke an operation precondition (non-scalar loss, bad label, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// The graph was already consumed by a backward pass.
    #[error("state error: {0}")]
    State(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
