use thiserror::Error;

/// Errors raised by tensor operations and model assembly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of bounds for length {len}")]
    Bounds { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension {
            op,
            detail: format!("incompatible shapes {a:?} and {b:?}"),
        }
    }
}
