use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// The requested weight / discount pair lies outside the admissible domain.
    #[error("inadmissible: {0}")]
    Inadmissible(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("numerical breakdown: {0}")]
    Numerical(String),
    #[error("memory budget exceeded: {need} bytes requested, budget {budget} bytes")]
    MemoryBudget { need: u64, budget: u64 },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
