use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] chorus_core::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Core(chorus_core::Error::Config {
            key: key.into(),
            message: message.into(),
        })
    }

    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(chorus_core::Error::Config { .. }) | CliError::Exists(_) => 2,
            _ => 1,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        let (kind, key, path) = match self {
            CliError::Core(e) => match e {
                chorus_core::Error::Config { key, .. } => ("config", Some(key.clone()), None),
                chorus_core::Error::Contract(_) => ("contract", None, None),
                chorus_core::Error::Numeric { .. } => ("numeric", None, None),
                chorus_core::Error::Io(_) => ("io", None, None),
                chorus_core::Error::Format(_) => ("format", None, None),
            },
            CliError::File { path, .. } => ("file", None, Some(path.display().to_string())),
            CliError::Exists(p) => ("exists", None, Some(p.display().to_string())),
            CliError::Format { path, .. } => ("format", None, Some(path.display().to_string())),
        };
        ErrorRecord {
            error: ErrorBody {
                kind,
                key,
                path,
                message: self.to_string(),
            },
        }
    }
}

/// Machine-readable failure record printed on stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: ErrorBody,
}

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}
