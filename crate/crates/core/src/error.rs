use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("layer {index} ({name}): field `{field}`: {message}")]
    Field {
        index: usize,
        name: String,
        field: &'static str,
        message: String,
    },

    #[error("shape mismatch between layer {producer} ({producer_name}) and layer {consumer} ({consumer_name}): {message}")]
    ShapeMismatch {
        producer: usize,
        producer_name: String,
        consumer: usize,
        consumer_name: String,
        message: String,
    },

    #[error("invalid layer {index}: {message}")]
    InvalidLayer { index: usize, message: String },

    #[error("graph validation failed with {} error(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),

    #[error("input resolution {height}x{width} is not divisible by {multiple}")]
    Resolution { height: usize, width: usize, multiple: usize },

    #[error("tensor shape mismatch: {0}")]
    Tensor(String),

    #[error("int32 accumulator overflow (value {value}) in {context}")]
    AccumulatorOverflow { value: i64, context: String },

    #[error("{engine} cannot execute {what}")]
    Unsupported { engine: &'static str, what: String },

    #[error("buffer capacity: {0}")]
    Buffer(String),

    #[error("invalid hardware config: {0}")]
    Hardware(String),

    #[error("missing stage tag for layer {0}")]
    MissingStage(usize),

    #[error("report error: {0}")]
    Report(String),

    #[error("tensor dump: {0}")]
    Dump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn tensor(msg: impl Into<String>) -> Self {
        Error::Tensor(msg.into())
    }
}
