use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("image format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("scene `{scene}`: {file}: {msg}")]
    Scene {
        scene: String,
        file: String,
        msg: String,
    },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("checkpoint error (parameter `{param}`): {msg}")]
    Checkpoint { param: String, msg: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at epoch {epoch} step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 1 numeric, 2 usage/config, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Eval(_) | Error::NonFiniteLoss { .. } => 1,
            Error::Io { .. } | Error::Checkpoint { .. } | Error::Format { .. } | Error::Scene { .. } => 3,
            Error::Dimension { .. }
            | Error::Config(_)
            | Error::Contract(_)
            | Error::Usage(_)
            | Error::Json(_) => 2,
        }
    }
}
