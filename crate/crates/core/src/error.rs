use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; `field` names the offending key.
    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    /// Tensor shapes or parameter layouts that do not fit together.
    #[error("shape error: {0}")]
    Shape(String),

    /// Shape mismatch attributed to a named layer.
    #[error("structural error in layer `{layer}`: {message}")]
    Structure { layer: String, message: String },

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values or numerically invalid intermediate results.
    #[error("numeric error: {message}")]
    Numeric {
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    /// Malformed files, reported with the byte offset where parsing failed.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            last_checkpoint: None,
        }
    }

    pub fn structure(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Structure {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
