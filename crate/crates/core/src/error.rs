use thiserror::Error;

/// Errors produced by the sensing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error(
        "rank-deficient Gram matrix (condition number {condition:.3e}): \
         atoms {first} and {second} are nearly collinear"
    )]
    RankDeficient {
        condition: f64,
        first: usize,
        second: usize,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Coarse classification used by front ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_) | Error::Config(_) => ErrorKind::Config,
            Error::DegenerateSignal(_)
            | Error::RankDeficient { .. }
            | Error::Numeric(_)
            | Error::Geometry(_) => ErrorKind::Numeric,
            Error::OutOfRange(_)
            | Error::Format(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
