//! OpenAI/vLLM-compatible `/v1/completions` client.

use std::collections::HashMap;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;

use super::backend::{BackendError, Completion, CompletionBackend, CompletionRequest, FinishReason};

/// Number of top log-probabilities requested when scoring options.
const TOP_LOGPROBS: u32 = 20;

#[derive(Debug)]
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    model: String,
    token: Option<String>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

impl HttpBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        token: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Permanent(format!("building HTTP client: {e}")))?;
        Ok(Self {
            client,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            token,
        })
    }

    fn post(&self, body: serde_json::Value) -> Result<CompletionResponse, BackendError> {
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("HTTP {status}")));
        }
        if status == StatusCode::TOO_MANY_REQUESTS
            || status == StatusCode::REQUEST_TIMEOUT
            || status.is_server_error()
        {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Permanent(format!("HTTP {status}: {text}")));
        }
        resp.json::<CompletionResponse>()
            .map_err(|e| BackendError::Transient(format!("decoding response: {e}")))
    }
}

impl CompletionBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": request.prompt,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stop": request.stop,
        });
        let resp = self.post(body)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Permanent("response has no choices".into()))?;
        let finish = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::LengthCap,
            _ => FinishReason::StopSequence,
        };
        Ok(Completion {
            text: choice.text,
            finish,
        })
    }

    fn option_logprobs(&self, prompt: &str, options: &[&str]) -> Result<Vec<f64>, BackendError> {
        let body = json!({
            "model": self.model,
            "prompt": prompt,
            "temperature": 0.0,
            "max_tokens": 1,
            "logprobs": TOP_LOGPROBS,
        });
        let resp = self.post(body)?;
        let top = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .and_then(|l| l.top_logprobs.into_iter().next().flatten())
            .ok_or(BackendError::NoLogprobs)?;
        let scores: Vec<f64> = options
            .iter()
            .map(|opt| {
                // Tokenizers differ on whether the leading space is its own token.
                let bare = opt.trim_start();
                [opt.to_string(), bare.to_string(), format!(" {bare}")]
                    .iter()
                    .filter_map(|k| top.get(k).copied())
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        if scores.iter().all(|s| s.is_infinite()) {
            return Err(BackendError::Permanent(
                "none of the options appear among the top log-probabilities".into(),
            ));
        }
        Ok(scores)
    }
}
