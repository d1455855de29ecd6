use thiserror::Error;

/// Errors raised by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("stage ordering error: {0}")]
    StageOrder(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse { offset, message: message.into() }
    }
}
