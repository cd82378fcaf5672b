//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or sequence shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value left the numeric domain an operation requires (non-finite
    /// input, non-positive scale, probabilities that do not normalize).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// An index (class label, record index) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// Invalid argument to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// A sequence exceeds the encoder's configured maximum length.
    #[error("length error: sequence of {got} tokens exceeds max_sequence {max}")]
    Length { got: usize, max: usize },

    /// Wrong number of items where a fixed arity is required.
    #[error("arity error: {0}")]
    Arity(String),

    /// Bundle document failed to parse as JSON.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Bundle document parsed but violates a schema invariant.
    #[error("validation error in category {category:?}, record {record}: {detail}")]
    Validation {
        category: String,
        record: usize,
        detail: String,
    },

    /// Bundle-level (not per-record) schema violation.
    #[error("validation error: {0}")]
    BundleValidation(String),

    /// Token/word map and description record disagree.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A loss function produced different values on repeated evaluation.
    #[error("determinism error: {0}")]
    Determinism(String),

    /// Optimizer invoked on parameters with missing gradients.
    #[error("optimizer state error: {0}")]
    OptimizerState(String),

    /// Run configuration is internally inconsistent (class mismatch,
    /// incompatible corpora).
    #[error("configuration error: {0}")]
    Config(String),

    /// The graph for a record is empty where a nonempty one is required.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Checkpoint or dataset file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
