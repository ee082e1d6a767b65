use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (validation -> 2, numeric -> 3, acceptance -> 4).
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dim(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("acceptance failure: {0}")]
    Acceptance(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Acceptance(_) => 4,
            _ => 2,
        }
    }
}
