use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument or dimension is out of its legal range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A node, class or token that is not part of the corpus.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Task or split sampling could not satisfy its preconditions.
    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("template error: {0}")]
    Template(String),

    /// A caller broke an operation's precondition (over-length sequence, empty support, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a NaN or infinite loss.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("corpus format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
