use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax row {row} has no unmasked keys")]
    EmptyRow { row: usize },

    #[error("index {index} out of range for {bound} rows")]
    Index { index: usize, bound: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
