use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: drawing has no strokes")]
    EmptyDrawing { line: usize },

    #[error("invalid drawing: {0}")]
    InvalidDrawing(String),

    #[error("class `{class}` has {available} samples, {required} required")]
    InsufficientSamples {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
