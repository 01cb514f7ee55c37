use std::path::PathBuf;

use thiserror::Error;

/// Process exit status for each failure class.
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        source: morphdet::Error,
    },
    #[error("invalid config {path}: {msg}")]
    Config { path: PathBuf, msg: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(morphdet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Data { source: morphdet::Error::NonFinite(_), .. }
            | CliError::Core(morphdet::Error::NonFinite(_)) => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        }
    }
}

impl From<morphdet::Error> for CliError {
    fn from(e: morphdet::Error) -> Self {
        match e {
            morphdet::Error::NonFinite(msg) => CliError::Diverged(msg),
            other => CliError::Core(other),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) trait WithPath<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T>;
}

impl<T> WithPath<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
    }
}

impl<T> WithPath<T> for morphdet::Result<T> {
    fn at(self, path: &std::path::Path) -> CliResult<T> {
        self.map_err(|source| match source {
            morphdet::Error::NonFinite(msg) => CliError::Diverged(msg),
            source => CliError::Data { path: path.to_path_buf(), source },
        })
    }
}
