use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unsupported parameters: {0}")]
    UnsupportedParameters(String),

    #[error("divergence in {stage}: particle {particle} left the finite region at node {node} (value {value:e})")]
    Divergence {
        stage: &'static str,
        particle: usize,
        node: usize,
        value: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("rate fit failed: {0}")]
    Fit(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
