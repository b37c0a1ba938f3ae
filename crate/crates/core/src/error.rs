use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("masking error: {0}")]
    Masking(String),
    #[error("seed error: {0}")]
    Seed(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("phantom error: {0}")]
    Phantom(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("degenerate class: {0}")]
    DegenerateClass(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
