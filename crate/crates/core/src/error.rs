use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty caption")]
    EmptyCaption,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("batch size {0} is too small; at least 2 required")]
    BatchTooSmall(usize),
    #[error("index {index} out of range for {len} samples")]
    BadIndex { index: usize, len: usize },
    #[error("{got} samples given, at least {need} required")]
    TooFewSamples { got: usize, need: usize },
    #[error("autoencoder losses are only defined in DNM* mode")]
    NotAutoencoderMode,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(what: &str, detail: impl ToString) -> Self {
        Error::Format {
            what: what.to_string(),
            detail: detail.to_string(),
        }
    }
}
