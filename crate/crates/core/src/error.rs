use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte offset {offset}: {message}")]
    FormatAtOffset { offset: u64, message: String },

    #[error("format error at record {record}: {message}")]
    FormatAtRecord { record: usize, message: String },

    #[error("index file section `{section}` is invalid: {message}")]
    Section { section: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn section(section: &str, msg: impl Into<String>) -> Self {
        Error::Section {
            section: section.to_string(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
