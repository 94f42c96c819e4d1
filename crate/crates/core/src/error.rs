use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A model or embedding backend failed. `retryable` is true for transport
    /// failures and 5xx/429 responses; `attempts` counts calls made.
    #[error("provider error from {provider} after {attempts} attempt(s): {message}")]
    Provider {
        provider: String,
        message: String,
        retryable: bool,
        attempts: u32,
    },

    #[error("could not parse model output: {0}")]
    Parse(String),

    /// The scripted test double was asked something it has no entry for.
    #[error("no scripted reply for {kind} request: {payload:?}")]
    Unscripted { kind: String, payload: String },

    #[error("update target {0} does not exist")]
    OpTargetMissing(u64),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Provider { .. })
    }
}
