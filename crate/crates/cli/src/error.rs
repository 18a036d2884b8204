use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] tinr_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(field: &str, msg: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    /// 0 success, 2 usage or config problems, 3 numerical failure, 1 anything
    /// else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(tinr_core::Error::NonFinite(_)) => 3,
            CliError::Io { .. } => 1,
            _ => 2,
        }
    }
}
