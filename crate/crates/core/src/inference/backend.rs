use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A plain-text completion request. The prompt already carries its own chat
/// framing, so no message structure is sent.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub stop: Vec<String>,
    pub max_tokens: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    StopSequence,
    LengthCap,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub text: String,
    pub finish: FinishReason,
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum BackendError {
    /// Worth retrying: timeouts, overload, 5xx.
    #[error("transient backend failure: {0}")]
    Transient(String),
    /// The request itself is bad; retrying will not help.
    #[error("permanent backend failure: {0}")]
    Permanent(String),
    /// Aborts the whole run.
    #[error("backend authentication failed: {0}")]
    Auth(String),
    /// The run was stopped (preemption, shutdown); aborts the whole run.
    #[error("backend run aborted: {0}")]
    Aborted(String),
    #[error("backend does not expose log-probabilities")]
    NoLogprobs,
}

impl BackendError {
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::Auth(_) | BackendError::Aborted(_))
    }
}

pub trait CompletionBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    /// Log-probability of each option as the next continuation of `prompt`.
    fn option_logprobs(&self, _prompt: &str, _options: &[&str]) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::NoLogprobs)
    }
}
