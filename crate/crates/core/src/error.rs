use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("link infeasible: {0}")]
    InfeasibleLink(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("sparsification ratio {q} keeps no entries of a {dim}-vector")]
    DegenerateRatio { q: f64, dim: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("planning error: {0}")]
    Planning(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
