use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the ranking engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or infinity appeared. `layer` names the offending layer when known.
    #[error("numerical error{}: {message}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numerical {
        layer: Option<usize>,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(layer: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numerical {
            layer,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Shape(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Schema(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
