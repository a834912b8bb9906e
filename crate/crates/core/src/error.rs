use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },
    #[error("invalid head selection: {0}")]
    InvalidHead(String),
    #[error("label {label} outside the active range 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("importance source mismatch: {0}")]
    SourceMismatch(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(&'static str),
    #[error("missing importance map: {0}")]
    MissingImportance(&'static str),
    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("stability condition violated at {count} coordinate(s), first {first:?}")]
    Unstable { count: usize, first: Vec<usize> },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { context, expected, got })
    }
}
