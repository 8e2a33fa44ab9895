use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid tiling: {0}")]
    Tiling(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(
        "out of device memory in stage `{stage}` while holding {tokens} tokens \
         (requested {requested} B with {in_use} B in use, limit {limit} B)"
    )]
    OutOfMemory {
        stage: &'static str,
        tokens: usize,
        requested: usize,
        in_use: usize,
        limit: usize,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint weights do not match the configured shapes: {}", .0.join(", "))]
    CheckpointShape(Vec<String>),

    #[error("malformed checkpoint: {0}")]
    CheckpointParse(String),

    #[error("stage `{0}` does not support gradients")]
    NotDifferentiable(String),

    #[error("invalid attribution request: {0}")]
    Attribution(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Error {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Runtime failures (as opposed to bad user input).
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            Error::OutOfMemory { .. } | Error::Io { .. } | Error::Diverged { .. }
        )
    }
}
