use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("class-unobserved: class {0} has no labeled samples")]
    ClassUnobserved(usize),

    #[error("degenerate-diagonal: s[{0}][{0}] is zero")]
    DegenerateDiagonal(usize),

    #[error("k out of range: k={k}, valid range is 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("hard-negative set for class {0} is empty")]
    EmptyHardSet(usize),

    #[error("numerical failure at batch {batch} (epoch {epoch}): {reason}")]
    NumericalFailure {
        epoch: usize,
        batch: usize,
        reason: String,
    },

    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }
}
