//! Batched rephrasing against a completion endpoint.
//!
//! Jobs are executed shortest prompt first (similar lengths end up in flight
//! together, which keeps server-side batches dense), at most
//! `max_in_flight` at a time, with per-job retries. Every finished job is
//! appended to a checkpoint so a preempted run resumes where it stopped, and
//! results are always returned in the original job order.

mod backend;
mod checkpoint;
mod http;
mod mock;

use std::collections::{HashMap, HashSet};
use std::ops::{ControlFlow, Range};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{BackendError, Completion, CompletionBackend, CompletionRequest, FinishReason};
pub use checkpoint::Checkpoint;
pub use http::HttpBackend;
pub use mock::{MockBackend, MockRule, MockScript};

use crate::prompt_engine::RenderedPrompt;
use crate::token_estimator::TokenEstimator;

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 1024;
pub const DEFAULT_BUCKET_CHARS: usize = 256;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("backend aborted the run after {completed} completed job(s): {source}")]
    Aborted {
        completed: usize,
        source: BackendError,
    },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error(
        "checkpoint {} was written with config fingerprint {found}, current config is {expected}; \
         remove it or restore the original config",
        path.display()
    )]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("duplicate job key {0}")]
    DuplicateJob(JobKey),
    #[error("invalid backend config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct JobKey {
    pub doc_id: String,
    pub index: u32,
    pub template_id: String,
}

impl std::fmt::Display for JobKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}@{}", self.doc_id, self.index, self.template_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    InFlight,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RephraseJob {
    pub key: JobKey,
    pub prompt: RenderedPrompt,
    pub attempts: u32,
    pub state: JobState,
}

impl RephraseJob {
    pub fn new(prompt: RenderedPrompt) -> Self {
        Self {
            key: JobKey {
                doc_id: prompt.doc_id.clone(),
                index: prompt.index,
                template_id: prompt.template_id.clone(),
            },
            prompt,
            attempts: 0,
            state: JobState::Pending,
        }
    }

    fn prompt_chars(&self) -> usize {
        self.prompt.prompt.chars().count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RephraseResult {
    pub key: JobKey,
    pub state: JobState,
    pub completion: String,
    pub finish: FinishReason,
    pub attempts: u32,
    pub latency_s: f64,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The deterministic part of a result, written to output shards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub doc_id: String,
    pub index: u32,
    pub template_id: String,
    pub model_id: String,
    pub finish: FinishReason,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&RephraseResult> for ResultRecord {
    fn from(r: &RephraseResult) -> Self {
        Self {
            doc_id: r.key.doc_id.clone(),
            index: r.key.index,
            template_id: r.key.template_id.clone(),
            model_id: r.model_id.clone(),
            finish: r.finish,
            completion: r.completion.clone(),
            error: r.error.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `mock` or `http`.
    pub kind: String,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub max_in_flight: usize,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub backoff_ms: u64,
    pub bucket_chars: usize,
    /// Mock response script (TOML), relative to the config file.
    pub mock_script: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: "mock".into(),
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "mistralai/Mistral-7B-Instruct-v0.2".into(),
            auth_env: None,
            max_in_flight: 8,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: crate::prompt_engine::DEFAULT_TEMPERATURE,
            max_retries: 3,
            timeout_secs: 120.0,
            backoff_ms: 500,
            bucket_chars: DEFAULT_BUCKET_CHARS,
            mock_script: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_in_flight < 1 {
            return Err(InferenceError::Config("max_in_flight must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(InferenceError::Config("temperature must be >= 0".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(InferenceError::Config("max_output_tokens must be positive".into()));
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return Err(InferenceError::Config("timeout_secs must be positive".into()));
        }
        match self.kind.as_str() {
            "mock" | "http" => Ok(()),
            other => Err(InferenceError::Config(format!("unknown backend kind {other:?}"))),
        }
    }

    pub(crate) fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_ms.saturating_mul(factor)).min(MAX_BACKOFF)
    }
}

/// Execution order plus the permutation back to job order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionPlan {
    /// `order[k]` is the job index executed k-th.
    pub order: Vec<usize>,
    /// Ranges over `order` whose prompts fall in the same length band.
    pub buckets: Vec<Range<usize>>,
}

impl ExecutionPlan {
    /// Puts execution-ordered values back into job order.
    pub fn restore<T>(&self, executed: Vec<T>) -> Vec<T> {
        let mut slots: Vec<Option<T>> = (0..executed.len()).map(|_| None).collect();
        for (k, value) in executed.into_iter().enumerate() {
            slots[self.order[k]] = Some(value);
        }
        slots
            .into_iter()
            .map(|v| v.expect("plan order is a permutation"))
            .collect()
    }
}

/// Stable sort by prompt length, grouped into bands of `bucket_chars`.
pub fn schedule(jobs: &[RephraseJob], bucket_chars: usize) -> ExecutionPlan {
    let lengths: Vec<usize> = jobs.iter().map(RephraseJob::prompt_chars).collect();
    let mut order: Vec<usize> = (0..jobs.len()).collect();
    order.sort_by_key(|&i| lengths[i]);

    let band = |i: usize| lengths[i] / bucket_chars.max(1);
    let mut buckets = Vec::new();
    let mut start = 0;
    for k in 1..=order.len() {
        if k == order.len() || band(order[k]) != band(order[start]) {
            buckets.push(start..k);
            start = k;
        }
    }
    ExecutionPlan { order, buckets }
}

/// Runs `work(k)` for `k in 0..n` on at most `max_in_flight` threads. Results
/// reach `on_result` on the calling thread, one at a time; returning `Break`
/// stops dispatching new work (running items still finish and are delivered).
pub fn run_bounded<R, W, F>(n: usize, max_in_flight: usize, work: W, mut on_result: F)
where
    R: Send,
    W: Fn(usize) -> R + Sync,
    F: FnMut(usize, R) -> ControlFlow<()>,
{
    if n == 0 {
        return;
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, R)>();
    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.clamp(1, n) {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= n {
                    break;
                }
                let result = work(k);
                if tx.send((k, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (k, result) in rx {
            if on_result(k, result).is_break() {
                stop.store(true, Ordering::SeqCst);
            }
        }
    });
}

enum JobOutcome {
    Finished(RephraseResult),
    Fatal(BackendError),
}

fn execute_job(job: &RephraseJob, backend: &dyn CompletionBackend, cfg: &BackendConfig) -> JobOutcome {
    let request = CompletionRequest {
        prompt: job.prompt.prompt.clone(),
        temperature: job.prompt.temperature,
        stop: job.prompt.stop.clone(),
        max_tokens: cfg.max_output_tokens,
    };
    let started = Instant::now();
    let mut attempts = job.attempts;
    let max_attempts = job.attempts + 1 + cfg.max_retries;
    let failure = loop {
        attempts += 1;
        match backend.complete(&request) {
            Ok(completion) => {
                return JobOutcome::Finished(RephraseResult {
                    key: job.key.clone(),
                    state: JobState::Done,
                    completion: completion.text,
                    finish: completion.finish,
                    attempts,
                    latency_s: started.elapsed().as_secs_f64(),
                    model_id: backend.model_id().to_string(),
                    error: None,
                })
            }
            Err(e) if e.is_fatal() => return JobOutcome::Fatal(e),
            Err(BackendError::Transient(msg)) if attempts < max_attempts => {
                log::debug!("{} attempt {attempts} failed: {msg}", job.key);
                std::thread::sleep(cfg.backoff(attempts));
            }
            Err(e) => break e,
        }
    };
    log::warn!("{} failed after {attempts} attempt(s): {failure}", job.key);
    JobOutcome::Finished(RephraseResult {
        key: job.key.clone(),
        state: JobState::Failed,
        completion: String::new(),
        finish: FinishReason::Error,
        attempts,
        latency_s: started.elapsed().as_secs_f64(),
        model_id: backend.model_id().to_string(),
        error: Some(failure.to_string()),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub jobs: usize,
    pub done: usize,
    pub failed: usize,
    pub wall_s: f64,
}

/// Executes `jobs` in plan order. `sink` sees every finished result as it
/// arrives (the checkpoint hook); the returned results are in job order.
pub fn run_batch(
    jobs: &[RephraseJob],
    plan: &ExecutionPlan,
    backend: &dyn CompletionBackend,
    cfg: &BackendConfig,
    mut sink: impl FnMut(&RephraseResult) -> Result<(), InferenceError>,
) -> Result<(Vec<RephraseResult>, BatchReport), InferenceError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut executed: Vec<Option<RephraseResult>> = vec![None; jobs.len()];
    let mut fatal: Option<BackendError> = None;
    let mut sink_error: Option<InferenceError> = None;
    let mut completed = 0;

    run_bounded(
        jobs.len(),
        cfg.max_in_flight,
        |k| execute_job(&jobs[plan.order[k]], backend, cfg),
        |k, outcome| match outcome {
            JobOutcome::Finished(result) => {
                if let Err(e) = sink(&result) {
                    sink_error.get_or_insert(e);
                    return ControlFlow::Break(());
                }
                completed += 1;
                executed[k] = Some(result);
                if fatal.is_some() {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            }
            JobOutcome::Fatal(e) => {
                fatal.get_or_insert(e);
                ControlFlow::Break(())
            }
        },
    );

    if let Some(e) = sink_error {
        return Err(e);
    }
    if let Some(source) = fatal {
        return Err(InferenceError::Aborted { completed, source });
    }
    let executed: Vec<RephraseResult> = executed
        .into_iter()
        .map(|r| r.expect("every job finished"))
        .collect();
    let results = plan.restore(executed);
    let report = BatchReport {
        jobs: jobs.len(),
        done: results.iter().filter(|r| r.state == JobState::Done).count(),
        failed: results.iter().filter(|r| r.state == JobState::Failed).count(),
        wall_s: started.elapsed().as_secs_f64(),
    };
    Ok((results, report))
}

/// Jobs not yet recorded as done in `checkpointed`.
pub fn resume(checkpointed: &[RephraseResult], jobs: &[RephraseJob]) -> Vec<RephraseJob> {
    let done: HashSet<&JobKey> = checkpointed
        .iter()
        .filter(|r| r.state == JobState::Done)
        .map(|r| &r.key)
        .collect();
    jobs.iter()
        .filter(|j| !done.contains(&j.key))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub jobs: usize,
    pub resumed: usize,
    pub requests_run: usize,
    pub done: usize,
    pub failed: usize,
    pub output_est_tokens: f64,
    pub wall_s: f64,
    pub tokens_per_s: f64,
    pub mean_latency_s: f64,
}

#[derive(Debug)]
pub struct RephraseOutcome {
    /// One result per job, in job order.
    pub results: Vec<RephraseResult>,
    pub report: ThroughputReport,
}

/// Full resumable run: loads the checkpoint, executes the remaining jobs and
/// merges old and new results back into job order.
pub fn rephrase_all(
    jobs: &[RephraseJob],
    backend: &dyn CompletionBackend,
    cfg: &BackendConfig,
    checkpoint_path: &Path,
    fingerprint: &str,
    estimator: &TokenEstimator,
) -> Result<RephraseOutcome, InferenceError> {
    let mut seen = HashSet::with_capacity(jobs.len());
    for job in jobs {
        if !seen.insert(&job.key) {
            return Err(InferenceError::DuplicateJob(job.key.clone()));
        }
    }
    let (mut checkpoint, previous) = Checkpoint::open(checkpoint_path, fingerprint)?;
    let remaining = resume(&previous, jobs);
    let resumed = jobs.len() - remaining.len();
    log::info!(
        "{} job(s): {resumed} already done, {} to run",
        jobs.len(),
        remaining.len()
    );

    let started = Instant::now();
    let plan = schedule(&remaining, cfg.bucket_chars);
    let (fresh, _) = run_batch(&remaining, &plan, backend, cfg, |r| checkpoint.append(r))?;
    let wall_s = started.elapsed().as_secs_f64();

    let mut by_key: HashMap<JobKey, RephraseResult> = previous
        .into_iter()
        .filter(|r| r.state == JobState::Done)
        .map(|r| (r.key.clone(), r))
        .collect();
    let requests_run = fresh.len();
    let fresh_tokens: f64 = fresh.iter().map(|r| estimator.estimate(&r.completion)).sum();
    let fresh_latency: f64 = fresh.iter().map(|r| r.latency_s).sum();
    for r in fresh {
        by_key.insert(r.key.clone(), r);
    }
    let results: Vec<RephraseResult> = jobs
        .iter()
        .map(|j| by_key.remove(&j.key).expect("every job has a result"))
        .collect();

    let report = ThroughputReport {
        jobs: jobs.len(),
        resumed,
        requests_run,
        done: results.iter().filter(|r| r.state == JobState::Done).count(),
        failed: results.iter().filter(|r| r.state == JobState::Failed).count(),
        output_est_tokens: fresh_tokens,
        wall_s,
        tokens_per_s: if wall_s > 0.0 { fresh_tokens / wall_s } else { 0.0 },
        mean_latency_s: if requests_run > 0 {
            fresh_latency / requests_run as f64
        } else {
            0.0
        },
    };
    Ok(RephraseOutcome { results, report })
}
