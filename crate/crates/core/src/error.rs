use thiserror::Error;

/// Errors produced by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("label could not be determined from gradients")]
    Undetermined,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
