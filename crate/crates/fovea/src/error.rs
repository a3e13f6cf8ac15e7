use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] fovea_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("network: {0}")]
    Net(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    /// An artifact was produced from different data than the one it is used with.
    #[error("{what}: data hash {found} does not match {expected}")]
    HashMismatch { what: String, expected: String, found: String },
    /// A session ended without a prediction.
    #[error("session failed: {0}")]
    Session(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
