use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("network is class-conditional ({classes} classes) but no label was given")]
    MissingCondition { classes: usize },

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("pool state: {0}")]
    PoolState(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("teacher rejected: {0}")]
    TeacherGate(String),

    #[error("model not trained: {0}")]
    Untrained(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
