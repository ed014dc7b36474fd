use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Failures of a command, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("malformed {what} '{path}': {detail}")]
    Config { what: &'static str, path: PathBuf, detail: String },
    #[error("checksum mismatch in '{0}': file is corrupt or truncated")]
    Checksum(PathBuf),
    #[error("invalid checkpoint '{path}': {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(#[from] ifam_core::Error),
}

impl CliError {
    /// Exit codes: 2 usage, 3 malformed config or plan, 4 checksum mismatch, 5 unreadable
    /// checkpoint, 6 I/O, 7 dataset, 8 model or training failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Checksum(_) => 4,
            CliError::Checkpoint { .. } => 5,
            CliError::Io { .. } => 6,
            CliError::Dataset(_) => 7,
            CliError::Core(_) => 8,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}
