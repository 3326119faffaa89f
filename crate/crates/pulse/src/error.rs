use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum PulseError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("integration diverged at step {step}: {detail}")]
    IntegrationDiverged { step: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PulseError>;
