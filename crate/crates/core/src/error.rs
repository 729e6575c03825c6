use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid privacy budget: {0}")]
    InvalidBudget(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("value {value} outside [-1, 1]; normalize before perturbing")]
    OutOfDomain { value: f64 },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("unknown item id `{0}`")]
    UnknownItem(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("non-finite score at item {index}")]
    NonFiniteScore { index: usize },

    #[error("experiment cell ({method}, seed {seed}) failed: {source}")]
    Cell {
        method: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse { path: path.into(), message: message.to_string() }
    }
}
