use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("whitening failed for group {group}: {source}")]
    GroupWhitening {
        group: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
