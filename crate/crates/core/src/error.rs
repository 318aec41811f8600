use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error at row {row}: {message}")]
    Schema { row: usize, message: String },

    #[error("duplicate visit {visit_index} for subject {subject_id}")]
    Duplicate { subject_id: String, visit_index: u32 },

    #[error("subject {subject_id} has {visits} visits, window length {window} needs more")]
    InsufficientVisits {
        subject_id: String,
        visits: usize,
        window: usize,
    },

    #[error("subject {0} has no ground-truth label")]
    Alignment(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(&'static str),

    #[error("checksum mismatch for {0}")]
    Checksum(PathBuf),

    #[error("checkpoint incompatible with config: {0}")]
    Compatibility(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by corrupt or inconsistent on-disk data rather
    /// than by the caller's configuration.
    pub fn is_integrity(&self) -> bool {
        matches!(self, Error::Checksum(_) | Error::Compatibility(_))
    }

    /// Process exit code: 3 for integrity errors, 1 for numeric failures,
    /// 2 for everything the caller can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            e if e.is_integrity() => 3,
            Error::Numeric(_) => 1,
            _ => 2,
        }
    }
}
