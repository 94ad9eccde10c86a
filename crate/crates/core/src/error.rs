use thiserror::Error;

/// Errors emitted by the library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },

    #[error("trajectory inconsistent with parameters: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {what}")]
    Malformed { path: String, what: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
