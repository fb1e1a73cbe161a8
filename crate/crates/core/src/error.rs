use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Non-finite or oversized amplitude during time integration.
    #[error("numerical blowup at step {step} (t = {time}): {detail}")]
    Blowup { step: usize, time: f64, detail: String },

    /// A stopping time was not resolved before the integration horizon.
    #[error("stopping time not resolved within horizon t_max = {horizon}")]
    Timeout { horizon: f64 },

    #[error("refused: {0}")]
    Refused(String),

    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
