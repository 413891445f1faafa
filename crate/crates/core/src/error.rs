use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid soft-label: {0}")]
    InvalidSoftLabel(String),

    #[error("batches are not aligned on identical sample indices")]
    Misaligned,

    #[error("duplicate sample index {0} in batch")]
    DuplicateIndex(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("aggregated batch does not cover sample index {0}")]
    Coverage(usize),

    #[error("protocol desynchronization: {0}")]
    Desync(String),

    #[error("input is not sorted in non-decreasing order")]
    Unsorted,

    #[error("dataset format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn is_desync(&self) -> bool {
        matches!(self, Error::Desync(_))
    }
}
