//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A kernel produced a NaN or infinity.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A structural parameter is out of its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An index or coordinate fell outside its domain.
    #[error("out of range: {0}")]
    Range(String),

    /// The caller violated an API contract.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("bag has no tiles")]
    EmptyBag,

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A metric is undefined on the given evaluation set.
    #[error("metric undefined: {0}")]
    Metric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
