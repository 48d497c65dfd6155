//! Ask-LLM scoring, external score ingestion and threshold filtering.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus_io::{read_jsonl, write_jsonl, CorpusError, Document};
use crate::inference::{run_bounded, BackendConfig, BackendError, CompletionBackend, CompletionRequest};
use crate::prompt_engine::{TemplateError, TemplateRegistry, ASK_LLM};
use crate::token_estimator::TokenEstimator;

/// Documents are judged on this many leading estimated tokens.
pub const ASK_LLM_TOKEN_BUDGET: f64 = 10_000.0;
pub const ASK_LLM_OPTIONS: [&str; 2] = ["yes", "no"];
/// Continuations scored at the `Choice:` position.
pub const ASK_LLM_CONTINUATIONS: [&str; 2] = [" yes", " no"];
pub const DEFAULT_VOTES: u32 = 5;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("document {0:?} is empty")]
    EmptyDocument(String),
    #[error("degenerate log-probabilities for {doc_id:?}: {detail}")]
    Degenerate { doc_id: String, detail: String },
    #[error("scoring {doc_id:?}: {source}")]
    Backend {
        doc_id: String,
        source: BackendError,
    },
    #[error("{} document(s) have no score under {scorer}: {}", ids.len(), preview(ids))]
    MissingScores { scorer: Scorer, ids: Vec<String> },
    #[error("duplicate score for document {id:?} in {path}")]
    DuplicateScore { id: String, path: String },
    #[error("invalid score {score} for document {id:?}")]
    InvalidScore { id: String, score: f64 },
    #[error("mixed scorers in one table: {0} and {1}")]
    MixedScorers(Scorer, Scorer),
    #[error("invalid scorer {0:?}")]
    InvalidScorer(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn preview(ids: &[String]) -> String {
    const SHOWN: usize = 20;
    let mut out = ids.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOWN {
        out.push_str(&format!(", ... ({} more)", ids.len() - SHOWN));
    }
    out
}

/// Who produced a score. Serialized as `ask_llm:<model>`,
/// `ask_llm_vote:<model>` or `external:<name>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scorer {
    AskLlm(String),
    /// Majority-vote fallback for backends without log-probabilities.
    AskLlmVote(String),
    External(String),
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scorer::AskLlm(m) => write!(f, "ask_llm:{m}"),
            Scorer::AskLlmVote(m) => write!(f, "ask_llm_vote:{m}"),
            Scorer::External(n) => write!(f, "external:{n}"),
        }
    }
}

impl FromStr for Scorer {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, name) = s
            .split_once(':')
            .filter(|(_, n)| !n.is_empty())
            .ok_or_else(|| FilterError::InvalidScorer(s.to_string()))?;
        match kind {
            "ask_llm" => Ok(Scorer::AskLlm(name.into())),
            "ask_llm_vote" => Ok(Scorer::AskLlmVote(name.into())),
            "external" => Ok(Scorer::External(name.into())),
            _ => Err(FilterError::InvalidScorer(s.to_string())),
        }
    }
}

impl Serialize for Scorer {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scorer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub score: f64,
    pub scorer: Scorer,
}

/// `p(yes) / (p(yes) + p(no))` from two log-probabilities, computed as a
/// logistic of the difference so it is exact under shifts and never
/// overflows.
pub fn normalize_pair(yes: f64, no: f64) -> Result<f64, String> {
    if yes.is_nan() || no.is_nan() {
        return Err("NaN log-probability".into());
    }
    if yes > 0.0 || no > 0.0 {
        return Err(format!("log-probabilities must be <= 0, got ({yes}, {no})"));
    }
    match (yes == f64::NEG_INFINITY, no == f64::NEG_INFINITY) {
        (true, true) => Err("both options have zero probability".into()),
        (true, false) => Ok(0.0),
        (false, true) => Ok(1.0),
        (false, false) => {
            let d = no - yes;
            Ok(if d > 0.0 {
                let e = (-d).exp();
                e / (1.0 + e)
            } else {
                1.0 / (1.0 + d.exp())
            })
        }
    }
}

/// Leading part of `doc` within the token budget.
pub fn truncate_for_scoring<'a>(doc: &'a Document, est: &TokenEstimator) -> &'a str {
    let cap = est.char_cap(&doc.lang, ASK_LLM_TOKEN_BUDGET);
    match doc.text.char_indices().nth(cap) {
        Some((byte, _)) => &doc.text[..byte],
        None => &doc.text,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Log-probabilities if the backend has them, votes otherwise.
    #[default]
    Auto,
    Logprobs,
    Vote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSettings {
    pub method: ScoreMethod,
    pub votes: u32,
    pub template: String,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            method: ScoreMethod::Auto,
            votes: DEFAULT_VOTES,
            template: ASK_LLM.to_string(),
        }
    }
}

fn with_retries<T>(
    cfg: &BackendConfig,
    doc_id: &str,
    mut call: impl FnMut() -> Result<T, BackendError>,
) -> Result<T, FilterError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match call() {
            Err(BackendError::Transient(msg)) if attempt <= cfg.max_retries => {
                log::debug!("{doc_id}: scoring attempt {attempt} failed: {msg}");
                std::thread::sleep(cfg.backoff(attempt));
            }
            other => {
                return other.map_err(|source| FilterError::Backend {
                    doc_id: doc_id.to_string(),
                    source,
                })
            }
        }
    }
}

fn is_affirmative(answer: &str) -> bool {
    answer
        .trim_start()
        .get(..3)
        .is_some_and(|w| w.eq_ignore_ascii_case("yes"))
}

/// Scores one document. `Vote` mode samples `votes` completions at
/// temperature 0 and reports the affirmative fraction.
pub fn askllm_score(
    doc: &Document,
    backend: &dyn CompletionBackend,
    registry: &TemplateRegistry,
    est: &TokenEstimator,
    settings: &ScoreSettings,
    cfg: &BackendConfig,
) -> Result<ScoredDocument, FilterError> {
    if doc.text.trim().is_empty() {
        return Err(FilterError::EmptyDocument(doc.id.clone()));
    }
    let prompt = registry.render_choice(&settings.template, truncate_for_scoring(doc, est), &ASK_LLM_OPTIONS)?;
    let model = backend.model_id().to_string();

    if settings.method != ScoreMethod::Vote {
        match with_retries(cfg, &doc.id, || backend.option_logprobs(&prompt, &ASK_LLM_CONTINUATIONS)) {
            Ok(lp) => {
                let score = normalize_pair(lp[0], lp[1]).map_err(|detail| FilterError::Degenerate {
                    doc_id: doc.id.clone(),
                    detail,
                })?;
                return Ok(ScoredDocument {
                    doc_id: doc.id.clone(),
                    score,
                    scorer: Scorer::AskLlm(model),
                });
            }
            Err(FilterError::Backend {
                source: BackendError::NoLogprobs,
                ..
            }) if settings.method == ScoreMethod::Auto => {}
            Err(e) => return Err(e),
        }
    }

    let votes = settings.votes.max(1);
    let request = CompletionRequest {
        prompt,
        temperature: 0.0,
        stop: vec!["\n".into()],
        max_tokens: 4,
    };
    let mut yes = 0;
    for _ in 0..votes {
        let completion = with_retries(cfg, &doc.id, || backend.complete(&request))?;
        if is_affirmative(&completion.text) {
            yes += 1;
        }
    }
    Ok(ScoredDocument {
        doc_id: doc.id.clone(),
        score: f64::from(yes) / f64::from(votes),
        scorer: Scorer::AskLlmVote(model),
    })
}

/// Scores keyed by document id under a single scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub scorer: Scorer,
    pub scores: BTreeMap<String, f64>,
}

impl ScoreTable {
    pub fn new(scorer: Scorer) -> Self {
        Self {
            scorer,
            scores: BTreeMap::new(),
        }
    }

    pub fn from_records(records: Vec<ScoredDocument>, origin: &str) -> Result<Self, FilterError> {
        let mut iter = records.into_iter();
        let Some(first) = iter.next() else {
            return Err(FilterError::InvalidScorer(format!("{origin}: no score records")));
        };
        let mut table = ScoreTable::new(first.scorer.clone());
        table.insert(first, origin)?;
        for record in iter {
            table.insert(record, origin)?;
        }
        Ok(table)
    }

    fn insert(&mut self, record: ScoredDocument, origin: &str) -> Result<(), FilterError> {
        if record.scorer != self.scorer {
            return Err(FilterError::MixedScorers(self.scorer.clone(), record.scorer));
        }
        let valid = match record.scorer {
            Scorer::External(_) => record.score.is_finite() && record.score >= 0.0,
            _ => (0.0..=1.0).contains(&record.score),
        };
        if !valid {
            return Err(FilterError::InvalidScore {
                id: record.doc_id,
                score: record.score,
            });
        }
        if self.scores.insert(record.doc_id.clone(), record.score).is_some() {
            return Err(FilterError::DuplicateScore {
                id: record.doc_id,
                path: origin.to_string(),
            });
        }
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<f64> {
        self.scores.get(doc_id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn records(&self) -> Vec<ScoredDocument> {
        self.scores
            .iter()
            .map(|(id, &score)| ScoredDocument {
                doc_id: id.clone(),
                score,
                scorer: self.scorer.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), FilterError> {
        write_jsonl(path, &self.records())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let records = read_jsonl::<ScoredDocument>(path)?.into_strict(path)?;
        Self::from_records(records, &path.display().to_string())
    }
}

#[derive(Deserialize)]
struct ExternalRecord {
    doc_id: String,
    score: f64,
}

/// Reads `(doc_id, score)` JSON Lines from an external classifier.
pub fn ingest_external_scores(path: &Path, name: &str) -> Result<ScoreTable, FilterError> {
    let records = read_jsonl::<ExternalRecord>(path)?.into_strict(path)?;
    let origin = path.display().to_string();
    let mut table = ScoreTable::new(Scorer::External(name.to_string()));
    for r in records {
        table.insert(
            ScoredDocument {
                doc_id: r.doc_id,
                score: r.score,
                scorer: table.scorer.clone(),
            },
            &origin,
        )?;
    }
    Ok(table)
}

/// Scores every document on the bounded worker pool; the table is merged on
/// the calling thread. The first error stops dispatch and is returned.
pub fn score_corpus(
    docs: &[Document],
    backend: &dyn CompletionBackend,
    registry: &TemplateRegistry,
    est: &TokenEstimator,
    settings: &ScoreSettings,
    cfg: &BackendConfig,
) -> Result<ScoreTable, FilterError> {
    let mut settings = settings.clone();
    if settings.method == ScoreMethod::Auto {
        // Pin the method on one probe so a run never mixes scorers.
        if let Some(doc) = docs.iter().find(|d| !d.text.trim().is_empty()) {
            let probe = askllm_score(doc, backend, registry, est, &settings, cfg)?;
            settings.method = match probe.scorer {
                Scorer::AskLlmVote(_) => ScoreMethod::Vote,
                _ => ScoreMethod::Logprobs,
            };
        }
    }
    let mut scored: Vec<Option<ScoredDocument>> = vec![None; docs.len()];
    let mut failure = None;
    run_bounded(
        docs.len(),
        cfg.max_in_flight,
        |k| askllm_score(&docs[k], backend, registry, est, &settings, cfg),
        |k, result| match result {
            Ok(s) => {
                scored[k] = Some(s);
                ControlFlow::Continue(())
            }
            Err(e) => {
                failure.get_or_insert(e);
                ControlFlow::Break(())
            }
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let scorer = match settings.method {
        ScoreMethod::Vote => Scorer::AskLlmVote(backend.model_id().into()),
        _ => Scorer::AskLlm(backend.model_id().into()),
    };
    let mut table = ScoreTable::new(scorer);
    for s in scored.into_iter().flatten() {
        table.insert(s, "scoring run")?;
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scorer: Scorer,
    pub threshold: f64,
    pub kept_docs: u64,
    pub dropped_docs: u64,
    pub kept_est_tokens: f64,
    pub dropped_est_tokens: f64,
}

impl FilterReport {
    pub fn render(&self) -> String {
        format!(
            "scorer {} threshold > {}\nkept    {:>10} docs {:>16.1} est. tokens\ndropped {:>10} docs {:>16.1} est. tokens\n",
            self.scorer, self.threshold, self.kept_docs, self.kept_est_tokens, self.dropped_docs, self.dropped_est_tokens
        )
    }
}

/// Keeps documents scoring strictly above `threshold`. Every document must
/// have a score.
pub fn threshold_filter(
    docs: Vec<Document>,
    table: &ScoreTable,
    threshold: f64,
    est: &TokenEstimator,
) -> Result<(Vec<Document>, FilterReport), FilterError> {
    let missing: Vec<String> = docs
        .iter()
        .filter(|d| table.get(&d.id).is_none())
        .map(|d| d.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(FilterError::MissingScores {
            scorer: table.scorer.clone(),
            ids: missing,
        });
    }
    let mut report = FilterReport {
        scorer: table.scorer.clone(),
        threshold,
        kept_docs: 0,
        dropped_docs: 0,
        kept_est_tokens: 0.0,
        dropped_est_tokens: 0.0,
    };
    let mut kept = Vec::new();
    for doc in docs {
        let tokens = est.estimate_in(&doc.lang, &doc.text);
        if table.get(&doc.id).is_some_and(|s| s > threshold) {
            report.kept_docs += 1;
            report.kept_est_tokens += tokens;
            kept.push(doc);
        } else {
            report.dropped_docs += 1;
            report.dropped_est_tokens += tokens;
        }
    }
    Ok((kept, report))
}
