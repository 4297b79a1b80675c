use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error("cannot read {path}: {source}")]
    PathUnreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("model {0:?} already exists")]
    DuplicateModel(String),
    #[error("no job has {ram} bytes free for model {model:?}")]
    NoCapacity { model: String, ram: u64 },
    #[error("invalid version {version} for model {model:?}: {reason}")]
    InvalidVersion {
        model: String,
        version: u64,
        reason: String,
    },
    #[error("invalid fleet config: {0}")]
    InvalidConfig(String),
    #[error("journal {path}: {message}")]
    Journal { path: PathBuf, message: String },
    #[error("journal I/O: {0}")]
    Io(#[from] std::io::Error),
}
