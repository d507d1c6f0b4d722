use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("dataset generation error: {0}")]
    Generation(String),
    #[error("backbone construction error: {0}")]
    Construction(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
