use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("loss requested over an empty position set")]
    EmptyLoss,

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid attention override: {0}")]
    InvalidOverride(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scheduling error: {0}")]
    Schedule(String),

    #[error("malformed attention: {0}")]
    MalformedAttention(String),

    #[error("sink mean is undefined for sequence length {0} (need at least 2)")]
    UndefinedMean(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: String },

    #[error("sparse input: {0}")]
    SparseInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: 2 config, 3 numeric, 4 I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schedule(_) | Error::InvalidOverride(_) => 2,
            Error::Shape(_)
            | Error::DegenerateRow { .. }
            | Error::EmptyLoss
            | Error::Divergence(_)
            | Error::MalformedAttention(_)
            | Error::UndefinedMean(_) => 3,
            Error::Format(_)
            | Error::Truncated { .. }
            | Error::SparseInput(_)
            | Error::Io { .. } => 4,
        }
    }
}
