use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("index {id} out of range for table of size {size}")]
    Index { id: usize, size: usize },

    #[error("every position is masked out of the loss")]
    DegenerateLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("operand out of domain: {0}")]
    Domain(String),

    #[error("unknown symbol {0:?}")]
    Tokenize(char),

    #[error("requested {requested} distinct pairs but only {available} exist")]
    Capacity { requested: usize, available: usize },

    #[error("sequence of length {len} exceeds context length {max}")]
    ContextLength { len: usize, max: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("loss became non-finite ({loss}) at iteration {iter}")]
    Diverged { iter: usize, loss: f64 },

    #[error("checkpoint magic mismatch")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
