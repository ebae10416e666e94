use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VidmaeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint version error: {0}")]
    Version(String),
}

impl VidmaeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VidmaeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            VidmaeError::Config(_) | VidmaeError::Shape(_) | VidmaeError::Version(_) => 2,
            VidmaeError::Io { .. }
            | VidmaeError::Parse { .. }
            | VidmaeError::Format(_)
            | VidmaeError::NotFound(_) => 3,
            VidmaeError::Numeric(_) | VidmaeError::Contract(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, VidmaeError>;
