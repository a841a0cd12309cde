use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: missing field {field:?}")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: row {row} has {got} cells, header has {expected}")]
    RaggedRow {
        line: usize,
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("line {line}: duplicate id {id:?} (first on line {first})")]
    DuplicateId { line: usize, id: String, first: usize },
    #[error("line {line}: {source}")]
    InvalidLine { line: usize, source: utp_core::Error },
    #[error("not a UTP checkpoint")]
    NotACheckpoint,
    #[error("vocabulary hash mismatch: expected {expected}, checkpoint has {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("checkpoint is truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint header: {0}")]
    BadHeader(String),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {0:e}")]
    GradcheckFailed(f64),
    #[error(transparent)]
    Core(#[from] utp_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category for the one-line CLI error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::MissingField { .. } => "missing-field",
            Error::RaggedRow { .. } => "ragged-row",
            Error::DuplicateId { .. } => "duplicate-id",
            Error::InvalidLine { .. } => "invalid-line",
            Error::NotACheckpoint => "not-a-checkpoint",
            Error::VocabMismatch { .. } => "vocab-mismatch",
            Error::Truncated(_) => "truncated",
            Error::BadHeader(_) => "bad-header",
            Error::Usage(_) => "usage",
            Error::GradcheckFailed(_) => "gradcheck-failed",
            Error::Core(_) => "core",
        }
    }
}
