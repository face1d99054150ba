use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("power iteration did not converge within {max_iter} iterations (last estimate {last_estimate})")]
    NotConverged { max_iter: usize, last_estimate: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("batch norm running statistics used before any training batch initialized them")]
    UninitializedStats,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) | Error::Graph(_) => 3,
            Error::NonFinite(_) => 4,
            _ => 1,
        }
    }
}
