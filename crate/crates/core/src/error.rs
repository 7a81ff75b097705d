use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    /// Every mixture component fell below the pruning threshold.
    #[error("all mixture components were pruned (prior and data disagree)")]
    AllComponentsPruned,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("out-of-order record at line {line}: {record}")]
    OutOfOrder { line: usize, record: String },

    #[error("no ground truth for epoch t = {0}")]
    MissingTruth(f64),

    #[error("invalid scenario: {}", .0.join("; "))]
    InvalidScenario(Vec<String>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
