use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} out of range for {what} at {path}")]
    Range {
        what: &'static str,
        path: String,
        value: i64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("32-bit accumulator overflow in {0}")]
    Overflow(&'static str),

    #[error("{unit} width overflow at row {row}, col {col}: value {value} does not fit in {bits} bits")]
    Width {
        unit: &'static str,
        row: usize,
        col: usize,
        value: i64,
        bits: u32,
    },

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("truncated dataset: {0}")]
    Truncated(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("state space of {states} tuples exceeds the enumeration limit of {limit}")]
    StateSpace { states: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
