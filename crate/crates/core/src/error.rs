use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    Tensor(String),

    #[error("shape mismatch at node {node}: {msg}")]
    Shape { node: usize, msg: String },

    #[error("invalid model structure: {0}")]
    Structure(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("layer collapse at node {node}: all {channels} output channels are zero")]
    Collapse { node: usize, channels: usize },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("corrupt package entry {entry}: {msg}")]
    CorruptPackage { entry: usize, msg: String },

    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    pub(crate) fn shape(node: usize, msg: impl Into<String>) -> Self {
        Error::Shape { node, msg: msg.into() }
    }
}
