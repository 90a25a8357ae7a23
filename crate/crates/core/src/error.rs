use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("{context}: got length {got}, expected {expected}")]
    Length {
        context: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("softmax row {row} has every column masked out")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("optimization diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("gradient for parameter '{name}' is non-finite")]
    NonFiniteGrad { name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("subgroup too small: {0}")]
    SubgroupTooSmall(String),

    #[error("table load failed: {0}")]
    Table(String),

    #[error("preprocess failed: {0}")]
    Preprocess(String),

    #[error("diagnostic undefined: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
