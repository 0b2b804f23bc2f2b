use thiserror::Error;

/// Errors raised by the numerical, graph and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {0} has (near) zero norm")]
    ZeroNormRow(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("k = {k} exceeds the available {available} entries")]
    KTooLarge { k: usize, available: usize },
    #[error("k' = {kprime} must be at least k = {k}")]
    KPrimeTooSmall { k: usize, kprime: usize },
    #[error("shard {0} is empty")]
    EmptyShard(usize),
    #[error("M = {m} is smaller than the {labels} distinct batch labels")]
    MTooSmall { m: usize, labels: usize },
    #[error("M = {m} exceeds the {n} available classes")]
    MTooLarge { m: usize, n: usize },
    #[error("label {0} is not in the active set")]
    LabelNotActive(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
