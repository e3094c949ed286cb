use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented constraint.
    #[error("configuration error: {0}")]
    Config(String),

    /// A task instance cannot be represented in the vocabulary.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An external rollout backend could not be reached.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    /// Exhaustive enumeration would exceed its budget.
    #[error("enumeration budget exceeded: {0}")]
    Budget(String),

    /// A value that must be finite was not.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint or config does not match the expected architecture.
    #[error("architecture mismatch in field `{field}`: expected {expected}, found {found}")]
    ArchMismatch {
        field: String,
        expected: String,
        found: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
