//! Deterministic, script-driven completion backend for tests and dry runs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::backend::{BackendError, Completion, CompletionBackend, CompletionRequest, FinishReason};
use crate::prompt_engine::{ends_inside_open_tag, CLOSE_TAG};
use crate::util::derive_seed;

/// `pattern` is a regex matched against the prompt; `response` may contain
/// `{passage}`, replaced with the passage text recovered from the prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    #[serde(default)]
    pub response: Option<String>,
    #[serde(default)]
    pub logprobs: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub model_id: String,
    pub rules: Vec<MockRule>,
    pub logprobs: bool,
    /// Used to turn `max_tokens` into a character cap.
    pub chars_per_token: f64,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            model_id: "mock".into(),
            rules: Vec::new(),
            logprobs: true,
            chars_per_token: 4.0,
        }
    }
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    rules: Vec<(Regex, MockRule)>,
    fail_first_attempts: u32,
    abort_after_calls: Option<usize>,
    auth_failure: bool,
    permanent_failure: Option<Regex>,
    latency: Duration,
    attempts: Mutex<HashMap<String, u32>>,
    calls: AtomicUsize,
    completed: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, regex::Error> {
        let rules = script
            .rules
            .iter()
            .map(|r| Ok((Regex::new(&r.pattern)?, r.clone())))
            .collect::<Result<_, regex::Error>>()?;
        Ok(Self {
            script,
            rules,
            fail_first_attempts: 0,
            abort_after_calls: None,
            auth_failure: false,
            permanent_failure: None,
            latency: Duration::ZERO,
            attempts: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
            completed: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
        })
    }

    /// Echo backend with the built-in responses.
    pub fn echo() -> Self {
        Self::new(MockScript::default()).expect("no rules to compile")
    }

    /// Each distinct prompt fails transiently on its first `n` attempts.
    pub fn fail_first_attempts(mut self, n: u32) -> Self {
        self.fail_first_attempts = n;
        self
    }

    /// Every call after `n` successful completions returns `Aborted`,
    /// simulating a preempted worker.
    pub fn abort_after(mut self, n: usize) -> Self {
        self.abort_after_calls = Some(n);
        self
    }

    pub fn auth_failure(mut self) -> Self {
        self.auth_failure = true;
        self
    }

    pub fn permanent_failure_on(mut self, pattern: &str) -> Result<Self, regex::Error> {
        self.permanent_failure = Some(Regex::new(pattern)?);
        Ok(self)
    }

    pub fn latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.script.logprobs = false;
        self
    }

    /// Requests received, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn rule_for(&self, prompt: &str) -> Option<&MockRule> {
        self.rules
            .iter()
            .find(|(re, _)| re.is_match(prompt))
            .map(|(_, r)| r)
    }

    fn default_response(prompt: &str) -> String {
        if prompt.contains("###DOCUMENT_START###") {
            let p = hash_probability(prompt);
            return if p >= 0.5 { "yes".into() } else { "no".into() };
        }
        if ends_inside_open_tag(prompt) {
            if prompt.ends_with("Question:\n") {
                "What is this passage about?\nAnswer: {passage}\n</text>".into()
            } else {
                "Question: What is this passage about?\nAnswer: {passage}\n</text>".into()
            }
        } else {
            "Paraphrase: {passage}</s>".into()
        }
    }

    fn generate(&self, request: &CompletionRequest) -> Completion {
        let template = self
            .rule_for(&request.prompt)
            .and_then(|r| r.response.clone())
            .unwrap_or_else(|| Self::default_response(&request.prompt));
        let full = template.replace("{passage}", recover_passage(&request.prompt));

        let stop_at = request
            .stop
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| full.find(s.as_str()))
            .min();
        let cap_chars = (request.max_tokens as f64 * self.script.chars_per_token).floor() as usize;
        let cap_at = full.char_indices().nth(cap_chars).map(|(i, _)| i);
        match (stop_at, cap_at) {
            (Some(stop), Some(cap)) if cap < stop => Completion {
                text: full[..cap].to_string(),
                finish: FinishReason::LengthCap,
            },
            (Some(stop), _) => Completion {
                text: full[..stop].to_string(),
                finish: FinishReason::StopSequence,
            },
            (None, Some(cap)) => Completion {
                text: full[..cap].to_string(),
                finish: FinishReason::LengthCap,
            },
            (None, None) => Completion {
                text: full,
                finish: FinishReason::StopSequence,
            },
        }
    }
}

struct InFlight<'a>(&'a AtomicUsize);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl CompletionBackend for MockBackend {
    fn model_id(&self) -> &str {
        &self.script.model_id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        let _guard = InFlight(&self.in_flight);
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }

        if self.auth_failure {
            return Err(BackendError::Auth("mock rejects credentials".into()));
        }
        if let Some(limit) = self.abort_after_calls {
            if self.completed.load(Ordering::SeqCst) >= limit {
                return Err(BackendError::Aborted("mock preempted".into()));
            }
        }
        if let Some(re) = &self.permanent_failure {
            if re.is_match(&request.prompt) {
                return Err(BackendError::Permanent("mock rejects prompt".into()));
            }
        }
        if self.fail_first_attempts > 0 {
            let mut attempts = self.attempts.lock().expect("attempt table poisoned");
            let seen = attempts.entry(request.prompt.clone()).or_insert(0);
            *seen += 1;
            if *seen <= self.fail_first_attempts {
                return Err(BackendError::Transient(format!("mock failure on attempt {seen}")));
            }
        }
        let completion = self.generate(request);
        self.completed.fetch_add(1, Ordering::SeqCst);
        Ok(completion)
    }

    fn option_logprobs(&self, prompt: &str, options: &[&str]) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.auth_failure {
            return Err(BackendError::Auth("mock rejects credentials".into()));
        }
        if !self.script.logprobs {
            return Err(BackendError::NoLogprobs);
        }
        if let Some(lp) = self.rule_for(prompt).and_then(|r| r.logprobs.clone()) {
            if lp.len() == options.len() {
                return Ok(lp);
            }
        }
        // First option gets probability p, the rest share 1 - p.
        let p = hash_probability(prompt).clamp(1e-6, 1.0 - 1e-6);
        let rest = (1.0 - p) / (options.len().saturating_sub(1).max(1)) as f64;
        Ok(options
            .iter()
            .enumerate()
            .map(|(i, _)| if i == 0 { p.ln() } else { rest.ln() })
            .collect())
    }
}

fn hash_probability(prompt: &str) -> f64 {
    (derive_seed(0, &[prompt]) % 10_000) as f64 / 10_000.0
}

/// Recovers the inserted text from a rendered prompt of any built-in shape.
fn recover_passage(prompt: &str) -> &str {
    if let Some(start) = prompt.find("###DOCUMENT_START###\n") {
        let body = &prompt[start + "###DOCUMENT_START###\n".len()..];
        if let Some(end) = body.find("\n###DOCUMENT_END###") {
            return &body[..end];
        }
    }
    if let Some(start) = prompt.find("<text>\n") {
        let body = &prompt[start + "<text>\n".len()..];
        if let Some(end) = body.rfind(&format!("\n{CLOSE_TAG}")) {
            return &body[..end];
        }
    }
    if let (Some(nl), Some(end)) = (prompt.find('\n'), prompt.rfind("[/INST]")) {
        if nl < end {
            return &prompt[nl + 1..end];
        }
    }
    prompt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_engine::{TemplateRegistry, QA_OPT_EN, QA_OPT_QWEN2, TODDLER};
    use crate::preprocessor::Passage;

    fn request(prompt: &str, stop: &[&str], max_tokens: u32) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            temperature: 0.0,
            stop: stop.iter().map(|s| s.to_string()).collect(),
            max_tokens,
        }
    }

    fn rendered(template: &str, text: &str) -> crate::prompt_engine::RenderedPrompt {
        let passage = Passage {
            doc_id: "d".into(),
            index: 0,
            lang: "en".into(),
            text: text.into(),
            est_tokens: 0.0,
            split_flags: Default::default(),
        };
        TemplateRegistry::builtin().render(&passage, template).unwrap()
    }

    #[test]
    fn echo_recovers_passages() {
        let mock = MockBackend::echo();
        let r = rendered(QA_OPT_EN, "Cats purr.\nDogs bark.");
        let c = mock.complete(&request(&r.prompt, &["</text>", "</s>"], 1024)).unwrap();
        assert_eq!(c.text, "Question: What is this passage about?\nAnswer: Cats purr.\nDogs bark.\n");
        assert_eq!(c.finish, FinishReason::StopSequence);

        let r = rendered(TODDLER, "Cats purr.");
        let c = mock.complete(&request(&r.prompt, &["</s>"], 1024)).unwrap();
        assert_eq!(c.text, "Paraphrase: Cats purr.");

        let r = rendered(QA_OPT_QWEN2, "Cats purr.");
        let c = mock.complete(&request(&r.prompt, &["</text>"], 1024)).unwrap();
        assert!(c.text.starts_with("What is this passage about?"));
    }

    #[test]
    fn scripted_rules_and_length_cap() {
        let script = MockScript {
            rules: vec![MockRule {
                pattern: "^ping".into(),
                response: Some("pong pong pong pong".into()),
                logprobs: Some(vec![-0.1, -3.0]),
            }],
            ..Default::default()
        };
        let mock = MockBackend::new(script).unwrap();
        let c = mock.complete(&request("ping", &["</text>"], 2)).unwrap();
        assert_eq!(c.finish, FinishReason::LengthCap);
        assert_eq!(c.text, "pong pon");
        assert_eq!(mock.option_logprobs("ping", &["yes", "no"]).unwrap(), [-0.1, -3.0]);
    }

    #[test]
    fn fault_injection() {
        let mock = MockBackend::echo().fail_first_attempts(1);
        let req = request("x", &[], 10);
        assert!(matches!(mock.complete(&req), Err(BackendError::Transient(_))));
        assert!(mock.complete(&req).is_ok());

        let mock = MockBackend::echo().abort_after(1);
        assert!(mock.complete(&req).is_ok());
        assert!(matches!(mock.complete(&req), Err(BackendError::Aborted(_))));

        let mock = MockBackend::echo().auth_failure();
        assert!(matches!(mock.complete(&req), Err(BackendError::Auth(_))));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn script_parses_from_toml() {
        let script: MockScript = toml::from_str(
            "model_id = \"m\"\n[[rules]]\npattern = \"a\"\nresponse = \"b\"\n",
        )
        .unwrap();
        assert_eq!(script.model_id, "m");
        assert_eq!(script.rules.len(), 1);
        assert!(script.logprobs);
    }
}
