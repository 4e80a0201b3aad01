use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AfaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AfaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("label {label} out of range for {classes} classes ({path}:{line})")]
    LabelRange {
        path: PathBuf,
        line: usize,
        label: i64,
        classes: usize,
    },

    #[error("non-finite {quantity} at step {step}\n{dump}")]
    NonFinite {
        quantity: &'static str,
        step: usize,
        dump: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AfaError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        AfaError::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        AfaError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
