//! Stage orchestration over a work directory.
//!
//! ```text
//! <work>/passages/   passage shards, documents.jsonl, estimator.json, manifest.json
//! <work>/rephrase/   checkpoint.jsonl, results.jsonl, failed.jsonl, throughput.json
//! <work>/rephrased/  document shards, audit.jsonl, postprocess_report.{json,txt}
//! <work>/scores/     scores.jsonl, scores_meta.json
//! <work>/filtered/   document shards, filter_report.{json,txt}
//! <work>/mix/        document shards, mix_report.{json,txt}
//! <work>/stats.{json,txt}
//! ```
//!
//! Every manifest carries its stage fingerprint; a stage refuses inputs whose
//! fingerprint differs from the one the current config implies.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Fingerprints, PipelineConfig, ScorerKind};
use crate::corpus_io::{
    corpus_stats, read_json, read_jsonl, write_corpus, write_json, write_jsonl, Corpus, CorpusError, Document,
    Provenance, ShardEntry, ShardManifest, StatsReport, MANIFEST_FILE,
};
use crate::inference::{
    rephrase_all, run_bounded, CompletionBackend, HttpBackend, InferenceError, JobState,
    MockBackend, MockScript, RephraseJob, ResultRecord, ThroughputReport,
};
use crate::mixer::{execute_mix, MixError, MixReport};
use crate::postprocessor::{AuditRecord, CleanedPassage, PostprocessError, Postprocessor};
use crate::preprocessor::{Passage, Preprocessor, SplitError, SplitFlag};
use crate::prompt_engine::TemplateError;
use crate::quality_filter::{
    ingest_external_scores, score_corpus, threshold_filter, FilterError, FilterReport, ScoreTable, Scorer,
};
use crate::token_estimator::{calibrate, CalibrationReport, CommandTokenCounter, EstimatorError, TokenEstimator};

pub const PASSAGES_DIR: &str = "passages";
pub const REPHRASE_DIR: &str = "rephrase";
pub const REPHRASED_DIR: &str = "rephrased";
pub const SCORES_DIR: &str = "scores";
pub const FILTERED_DIR: &str = "filtered";
pub const MIX_DIR: &str = "mix";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage}: {}", path.display())]
    MissingInput { stage: String, path: PathBuf, hint: String },
    #[error(
        "{} was produced with fingerprint {found}, the current config implies {expected}; rerun the upstream stages",
        path.display()
    )]
    Fingerprint {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{0}")]
    Setup(String),
    #[error("duplicate document id {0:?} in input")]
    DuplicateDocument(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Split(#[from] SplitError),
}

impl PipelineError {
    /// 1 usage/config, 2 data, 3 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Fingerprint { .. }
            | PipelineError::Setup(_)
            | PipelineError::Template(_)
            | PipelineError::Postprocess(_)
            | PipelineError::Split(_) => 1,
            PipelineError::Inference(e) => match e {
                InferenceError::Aborted { .. } => 3,
                InferenceError::FingerprintMismatch { .. } | InferenceError::Config(_) => 1,
                _ => 2,
            },
            PipelineError::Filter(e) => match e {
                FilterError::Backend { .. } | FilterError::Degenerate { .. } => 3,
                FilterError::Template(_) | FilterError::InvalidScorer(_) => 1,
                _ => 2,
            },
            _ => 2,
        }
    }

    /// Extra guidance printed under the error.
    pub fn hint(&self) -> Option<&str> {
        match self {
            PipelineError::MissingInput { hint, .. } => Some(hint),
            _ => None,
        }
    }
}

fn missing(stage: &str, path: &Path, hint: &str) -> PipelineError {
    PipelineError::MissingInput {
        stage: stage.to_string(),
        path: path.to_path_buf(),
        hint: hint.to_string(),
    }
}

/// A validated config plus its fingerprints.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub fingerprints: Fingerprints,
}

/// Document-level record kept alongside the passages for reassembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentEntry {
    pub id: String,
    pub lang: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub passages: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub docs: u64,
    pub passages: u64,
    pub est_tokens: f64,
    pub oversize_unsplittable: u64,
    pub undersize_tail: u64,
    pub calibration: CalibrationReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocessReport {
    pub input_docs: u64,
    pub output_docs: u64,
    pub dropped_docs: BTreeMap<String, u64>,
    pub passages: u64,
    pub accepted_passages: u64,
    pub rejected_passages: BTreeMap<String, u64>,
}

impl PostprocessReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "documents: {} in, {} out\n",
            self.input_docs, self.output_docs
        );
        for (reason, n) in &self.dropped_docs {
            out.push_str(&format!("  dropped {reason}: {n}\n"));
        }
        out.push_str(&format!(
            "passages: {} in, {} accepted\n",
            self.passages, self.accepted_passages
        ));
        for (reason, n) in &self.rejected_passages {
            out.push_str(&format!("  rejected {reason}: {n}\n"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoresMeta {
    pub scorer: Scorer,
    pub corpus: String,
    pub corpus_fingerprint: String,
    pub docs: u64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub preprocess: PreprocessReport,
    pub throughput: ThroughputReport,
    pub postprocess: PostprocessReport,
    pub filter: Option<FilterReport>,
    pub mix: Option<MixReport>,
    pub stats: StatsReport,
}

fn reset_dir(dir: &Path) -> Result<(), CorpusError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))
}

fn parallelism() -> usize {
    std::thread::available_parallelism().map_or(4, |n| n.get())
}

/// Builds the backend named in the config. Bearer tokens come from the
/// environment variable named by `backend.auth_env`.
pub fn build_backend(cfg: &PipelineConfig) -> Result<Box<dyn CompletionBackend>, PipelineError> {
    let b = &cfg.backend;
    match b.kind.as_str() {
        "mock" => {
            let script = match &b.mock_script {
                Some(file) => MockScript::load(&cfg.resolve(file)).map_err(PipelineError::Setup)?,
                None => MockScript::default(),
            };
            let backend = MockBackend::new(script).map_err(|e| PipelineError::Setup(format!("mock script: {e}")))?;
            Ok(Box::new(backend))
        }
        "http" => {
            let token = match &b.auth_env {
                Some(var) => Some(std::env::var(var).map_err(|_| {
                    PipelineError::Setup(format!("environment variable {var} (backend.auth_env) is not set"))
                })?),
                None => None,
            };
            let backend = HttpBackend::new(&b.endpoint, &b.model, token, Duration::from_secs_f64(b.timeout_secs))
                .map_err(|e| PipelineError::Setup(e.to_string()))?;
            Ok(Box::new(backend))
        }
        other => Err(PipelineError::Setup(format!("unknown backend kind {other:?}"))),
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let fingerprints = cfg.fingerprints()?;
        Ok(Self { cfg, fingerprints })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::new(PipelineConfig::load(path)?)
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.cfg.work_dir().join(name)
    }

    fn counter(&self) -> Option<CommandTokenCounter> {
        self.cfg
            .estimator
            .counter_command
            .as_deref()
            .and_then(CommandTokenCounter::new)
    }

    /// Calibrated estimator from the preprocess stage, or the configured
    /// default ratio when preprocessing has not run.
    pub fn estimator(&self) -> Result<TokenEstimator, PipelineError> {
        let path = self.dir(PASSAGES_DIR).join("estimator.json");
        if path.is_file() {
            Ok(read_json(&path)?)
        } else {
            Ok(TokenEstimator::with_ratio(self.cfg.estimator.default_ratio)?)
        }
    }

    fn checked_manifest(&self, path: &Path, stage: &str, expected: &str, hint: &str) -> Result<ShardManifest, PipelineError> {
        if !path.is_file() {
            return Err(missing(stage, path, hint));
        }
        let manifest = ShardManifest::load(path)?;
        if manifest.fingerprint != expected {
            return Err(PipelineError::Fingerprint {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: manifest.fingerprint,
            });
        }
        Ok(manifest)
    }

    fn load_input(&self, est: &TokenEstimator) -> Result<Vec<Document>, PipelineError> {
        let path = self.cfg.resolve(&self.cfg.input);
        let corpus = Corpus::open(&path, est)?;
        let docs = corpus.load_all()?;
        let mut seen = HashSet::with_capacity(docs.len());
        for d in &docs {
            d.validate(&self.cfg.languages)?;
            if !seen.insert(d.id.as_str()) {
                return Err(PipelineError::DuplicateDocument(d.id.clone()));
            }
        }
        Ok(docs)
    }

    pub fn preprocess(&self) -> Result<PreprocessReport, PipelineError> {
        let default_est = TokenEstimator::with_ratio(self.cfg.estimator.default_ratio)?;
        let docs = self.load_input(&default_est)?;
        let counter = self.counter();
        let (est, calibration) = calibrate(
            &docs,
            counter.as_ref().map(|c| c as &dyn crate::token_estimator::TokenCounter),
            &self.cfg.calibration_settings(),
        )?;
        let pre = Preprocessor::new(self.cfg.split.clone())?;

        let mut per_doc: Vec<Vec<Passage>> = vec![Vec::new(); docs.len()];
        run_bounded(
            docs.len(),
            parallelism(),
            |k| pre.split_document(&docs[k], &est.for_language(&docs[k].lang)),
            |k, passages| {
                per_doc[k] = passages;
                ControlFlow::Continue(())
            },
        );

        let dir = self.dir(PASSAGES_DIR);
        reset_dir(&dir)?;
        let entries: Vec<DocumentEntry> = docs
            .iter()
            .zip(&per_doc)
            .map(|(d, p)| DocumentEntry {
                id: d.id.clone(),
                lang: d.lang.clone(),
                meta: d.meta.clone(),
                passages: p.len() as u32,
            })
            .collect();
        write_jsonl(&dir.join("documents.jsonl"), &entries)?;

        let passages: Vec<Passage> = per_doc.into_iter().flatten().collect();
        let mut manifest = ShardManifest::new("preprocess", &self.fingerprints.preprocess);
        for (i, chunk) in passages.chunks(self.cfg.shard_size).enumerate() {
            let path = dir.join(format!("passages-{i:05}.jsonl"));
            write_jsonl(&path, chunk)?;
            manifest.push(
                ShardEntry {
                    path,
                    docs: chunk.len() as u64,
                    est_tokens: chunk.iter().map(|p| p.est_tokens).sum(),
                },
                &dir,
            );
        }
        manifest.save(&dir.join(MANIFEST_FILE))?;
        write_json(&dir.join("estimator.json"), &est)?;

        let flagged = |f: SplitFlag| passages.iter().filter(|p| p.split_flags.contains(&f)).count() as u64;
        let report = PreprocessReport {
            docs: docs.len() as u64,
            passages: passages.len() as u64,
            est_tokens: manifest.total_est_tokens,
            oversize_unsplittable: flagged(SplitFlag::OversizeUnsplittable),
            undersize_tail: flagged(SplitFlag::UndersizeTail),
            calibration,
        };
        write_json(&dir.join("preprocess_report.json"), &report)?;
        log::info!(
            "preprocess: {} docs -> {} passages ({} oversize, {} undersize tails)",
            report.docs,
            report.passages,
            report.oversize_unsplittable,
            report.undersize_tail
        );
        Ok(report)
    }

    fn load_passages(&self) -> Result<(Vec<DocumentEntry>, Vec<Passage>), PipelineError> {
        let dir = self.dir(PASSAGES_DIR);
        let manifest = self.checked_manifest(
            &dir.join(MANIFEST_FILE),
            "rephrase",
            &self.fingerprints.preprocess,
            "run `preprocess` first",
        )?;
        let mut passages = Vec::with_capacity(manifest.total_docs as usize);
        for path in manifest.shard_paths(&dir) {
            passages.extend(read_jsonl::<Passage>(&path)?.into_strict(&path)?);
        }
        let path = dir.join("documents.jsonl");
        let entries = read_jsonl::<DocumentEntry>(&path)?.into_strict(&path)?;
        Ok((entries, passages))
    }

    fn jobs(&self, passages: &[Passage]) -> Result<Vec<RephraseJob>, PipelineError> {
        let registry = self.cfg.registry()?;
        passages
            .iter()
            .map(|p| {
                let template = self.cfg.templates.for_language(&p.lang);
                Ok(RephraseJob::new(registry.render(p, template)?))
            })
            .collect()
    }

    pub fn rephrase(&self) -> Result<ThroughputReport, PipelineError> {
        let backend = build_backend(&self.cfg)?;
        self.rephrase_with(backend.as_ref())
    }

    pub fn rephrase_with(&self, backend: &dyn CompletionBackend) -> Result<ThroughputReport, PipelineError> {
        let (_, passages) = self.load_passages()?;
        let est = self.estimator()?;
        let jobs = self.jobs(&passages)?;
        let dir = self.dir(REPHRASE_DIR);
        let outcome = rephrase_all(
            &jobs,
            backend,
            &self.cfg.backend,
            &dir.join("checkpoint.jsonl"),
            &self.fingerprints.rephrase,
            &est,
        )?;

        let records: Vec<ResultRecord> = outcome.results.iter().map(ResultRecord::from).collect();
        let results_path = dir.join("results.jsonl");
        write_jsonl(&results_path, &records)?;
        let failed: Vec<&ResultRecord> = outcome
            .results
            .iter()
            .zip(&records)
            .filter(|(r, _)| r.state == JobState::Failed)
            .map(|(_, rec)| rec)
            .collect();
        write_jsonl(&dir.join("failed.jsonl"), failed)?;
        let mut manifest = ShardManifest::new("rephrase", &self.fingerprints.rephrase);
        manifest.push(
            ShardEntry {
                path: results_path,
                docs: records.len() as u64,
                est_tokens: records.iter().map(|r| est.estimate(&r.completion)).sum(),
            },
            &dir,
        );
        manifest.save(&dir.join(MANIFEST_FILE))?;
        write_json(&dir.join("throughput.json"), &outcome.report)?;
        log::info!(
            "rephrase: {} jobs, {} done, {} failed, {:.1} est. tokens/s",
            outcome.report.jobs,
            outcome.report.done,
            outcome.report.failed,
            outcome.report.tokens_per_s
        );
        Ok(outcome.report)
    }

    pub fn postprocess(&self) -> Result<PostprocessReport, PipelineError> {
        let (entries, _) = self.load_passages()?;
        let rephrase_dir = self.dir(REPHRASE_DIR);
        let manifest = self.checked_manifest(
            &rephrase_dir.join(MANIFEST_FILE),
            "postprocess",
            &self.fingerprints.rephrase,
            "run `rephrase` first",
        )?;
        let mut records: Vec<ResultRecord> = Vec::new();
        for path in manifest.shard_paths(&rephrase_dir) {
            records.extend(read_jsonl::<ResultRecord>(&path)?.into_strict(&path)?);
        }
        let registry = self.cfg.registry()?;
        let post = Postprocessor::new(self.cfg.postprocess.clone(), &self.cfg.patterns()?, self.cfg.seed)?;
        let est = self.estimator()?;

        let mut by_doc: BTreeMap<&str, Vec<&ResultRecord>> = BTreeMap::new();
        for r in &records {
            by_doc.entry(r.doc_id.as_str()).or_default().push(r);
        }

        let mut report = PostprocessReport::default();
        let mut audit = Vec::new();
        let mut out = Vec::new();
        for entry in &entries {
            report.input_docs += 1;
            let mut results = by_doc.remove(entry.id.as_str()).unwrap_or_default();
            results.sort_by_key(|r| r.index);
            let mut cleaned: Vec<CleanedPassage> = Vec::with_capacity(results.len());
            for r in &results {
                let verdict = if r.error.is_some() {
                    post.failed(&r.doc_id, r.index)
                } else {
                    let prefix = registry.get(&r.template_id)?.completion_prefix.as_deref();
                    post.process(&r.doc_id, r.index, &r.completion, prefix)
                };
                report.passages += 1;
                match verdict.rejection {
                    None => report.accepted_passages += 1,
                    Some(reason) => {
                        *report.rejected_passages.entry(reason.as_str().to_string()).or_default() += 1;
                        audit.push(AuditRecord {
                            doc_id: r.doc_id.clone(),
                            index: Some(r.index),
                            reason: reason.as_str().to_string(),
                        });
                    }
                }
                cleaned.push(verdict);
            }
            let source = Document {
                id: entry.id.clone(),
                text: String::new(),
                lang: entry.lang.clone(),
                meta: entry.meta.clone(),
                provenance: Provenance::Original,
            };
            let provenance = Provenance::Rephrased {
                template_id: results
                    .first()
                    .map_or_else(|| self.cfg.templates.for_language(&entry.lang).to_string(), |r| r.template_id.clone()),
                model_id: results
                    .iter()
                    .find(|r| r.error.is_none())
                    .or(results.first())
                    .map_or_else(|| self.cfg.backend.model.clone(), |r| r.model_id.clone()),
            };
            match post.assemble_document(&source, &cleaned, provenance) {
                Ok(doc) => {
                    report.output_docs += 1;
                    out.push(doc);
                }
                Err(drop) => {
                    *report.dropped_docs.entry(drop.as_str().to_string()).or_default() += 1;
                    audit.push(AuditRecord {
                        doc_id: entry.id.clone(),
                        index: None,
                        reason: drop.as_str().to_string(),
                    });
                }
            }
        }
        if let Some(orphan) = by_doc.keys().next() {
            return Err(PipelineError::Corpus(CorpusError::InvalidDocument {
                id: orphan.to_string(),
                reason: "rephrase result without a matching input document".into(),
            }));
        }

        let dir = self.dir(REPHRASED_DIR);
        reset_dir(&dir)?;
        write_corpus(&dir, "postprocess", &self.fingerprints.postprocess, &out, self.cfg.shard_size, &est)?;
        write_jsonl(&dir.join("audit.jsonl"), &audit)?;
        write_json(&dir.join("postprocess_report.json"), &report)?;
        fs::write(dir.join("postprocess_report.txt"), report.render()).map_err(|e| CorpusError::io(&dir, e))?;
        log::info!(
            "postprocess: {} docs in, {} out, {}/{} passages accepted",
            report.input_docs,
            report.output_docs,
            report.accepted_passages,
            report.passages
        );
        Ok(report)
    }

    /// Resolves `@input`, `@rephrased`, `@filtered` or a path, checking the
    /// stage fingerprint of pipeline outputs.
    pub fn open_corpus(&self, reference: &str, est: &TokenEstimator) -> Result<(Corpus, String), PipelineError> {
        let stage = |dir: &str, fp: &str, hint: &str| -> Result<(Corpus, String), PipelineError> {
            let path = self.dir(dir).join(MANIFEST_FILE);
            let manifest = self.checked_manifest(&path, reference, fp, hint)?;
            Ok((
                Corpus {
                    dir: self.dir(dir),
                    manifest,
                },
                fp.to_string(),
            ))
        };
        match reference {
            "@input" => {
                let path = self.cfg.resolve(&self.cfg.input);
                let corpus = Corpus::open(&path, est)?;
                let fp = corpus.manifest.fingerprint.clone();
                Ok((corpus, fp))
            }
            "@rephrased" => stage(REPHRASED_DIR, &self.fingerprints.postprocess, "run `postprocess` first"),
            "@filtered" => stage(FILTERED_DIR, &self.fingerprints.filter, "run `filter` first"),
            path => {
                let path = self.cfg.resolve(path);
                if !path.exists() {
                    return Err(missing("corpus", &path, "check the corpus path"));
                }
                let corpus = Corpus::open(&path, est)?;
                let fp = corpus.manifest.fingerprint.clone();
                Ok((corpus, fp))
            }
        }
    }

    pub fn score(&self) -> Result<ScoresMeta, PipelineError> {
        let backend = build_backend(&self.cfg)?;
        self.score_with(backend.as_ref())
    }

    pub fn score_with(&self, backend: &dyn CompletionBackend) -> Result<ScoresMeta, PipelineError> {
        let est = self.estimator()?;
        let (corpus, corpus_fp) = self.open_corpus(&self.cfg.filter.corpus, &est)?;
        let docs = corpus.load_all()?;
        let table = match self.cfg.filter.scorer {
            ScorerKind::AskLlm => score_corpus(
                &docs,
                backend,
                &self.cfg.registry()?,
                &est,
                &self.cfg.filter.ask_llm,
                &self.cfg.backend,
            )?,
            ScorerKind::External => self.external_table()?,
        };
        let dir = self.dir(SCORES_DIR);
        reset_dir(&dir)?;
        table.save(&dir.join("scores.jsonl"))?;
        let meta = ScoresMeta {
            scorer: table.scorer.clone(),
            corpus: self.cfg.filter.corpus.clone(),
            corpus_fingerprint: corpus_fp,
            docs: table.len() as u64,
        };
        write_json(&dir.join("scores_meta.json"), &meta)?;
        log::info!("score: {} documents scored by {}", meta.docs, meta.scorer);
        Ok(meta)
    }

    fn external_table(&self) -> Result<ScoreTable, PipelineError> {
        let file = self
            .cfg
            .filter
            .external_scores
            .as_deref()
            .ok_or_else(|| PipelineError::Setup("filter.external_scores is not set".into()))?;
        let path = self.cfg.resolve(file);
        if !path.is_file() {
            return Err(missing("filter", &path, "external score file not found"));
        }
        Ok(ingest_external_scores(&path, &self.cfg.filter.external_name)?)
    }

    /// Score table for filtering: external scores are read directly; model
    /// scores come from the `score` stage (an absent table counts as empty,
    /// so every document is reported missing).
    fn filter_table(&self) -> Result<ScoreTable, PipelineError> {
        match self.cfg.filter.scorer {
            ScorerKind::External => self.external_table(),
            ScorerKind::AskLlm => {
                let path = self.dir(SCORES_DIR).join("scores.jsonl");
                if path.is_file() && fs::metadata(&path).map_or(0, |m| m.len()) > 0 {
                    Ok(ScoreTable::load(&path)?)
                } else {
                    Ok(ScoreTable::new(Scorer::AskLlm(self.cfg.backend.model.clone())))
                }
            }
        }
    }

    pub fn filter(&self, threshold: Option<f64>) -> Result<FilterReport, PipelineError> {
        let threshold = threshold.unwrap_or(self.cfg.filter.threshold);
        if !threshold.is_finite() {
            return Err(PipelineError::Setup(format!("invalid threshold {threshold}")));
        }
        let est = self.estimator()?;
        let (corpus, _) = self.open_corpus(&self.cfg.filter.corpus, &est)?;
        let docs = corpus.load_all()?;
        let table = self.filter_table()?;
        let (kept, report) = threshold_filter(docs, &table, threshold, &est)?;
        let dir = self.dir(FILTERED_DIR);
        reset_dir(&dir)?;
        // A threshold override is part of what produced the output.
        let fingerprint = if threshold == self.cfg.filter.threshold {
            self.fingerprints.filter.clone()
        } else {
            let mut cfg = self.cfg.clone();
            cfg.filter.threshold = threshold;
            cfg.fingerprints()?.filter
        };
        write_corpus(&dir, "filter", &fingerprint, &kept, self.cfg.shard_size, &est)?;
        write_json(&dir.join("filter_report.json"), &report)?;
        fs::write(dir.join("filter_report.txt"), report.render()).map_err(|e| CorpusError::io(&dir, e))?;
        log::info!(
            "filter: kept {} of {} documents (score > {threshold})",
            report.kept_docs,
            report.kept_docs + report.dropped_docs
        );
        Ok(report)
    }

    pub fn mix(&self) -> Result<MixReport, PipelineError> {
        let spec = self
            .cfg
            .mix
            .as_ref()
            .ok_or_else(|| PipelineError::Setup("config has no [mix] section".into()))?;
        let est = self.estimator()?;
        let mut sources = Vec::with_capacity(spec.sources.len());
        for s in &spec.sources {
            let (corpus, _) = self.open_corpus(&s.corpus, &est)?;
            sources.push(corpus.load_all()?);
        }
        let dir = self.dir(MIX_DIR);
        reset_dir(&dir)?;
        let (_, report) = execute_mix(spec, &sources, &est, &dir, &self.fingerprints.mix)?;
        log::info!("mix: {} documents", report.total_docs);
        Ok(report)
    }

    /// Dataset / mio. docs / B tokens over the input and every stage output
    /// present in the work directory.
    pub fn stats(&self) -> Result<StatsReport, PipelineError> {
        let est = self.estimator()?;
        let counter = self.counter();
        let counter = counter.as_ref().map(|c| c as &dyn crate::token_estimator::TokenCounter);
        let mut report = StatsReport::default();
        let name = &self.cfg.dataset_name;
        let input = Corpus::open(&self.cfg.resolve(&self.cfg.input), &est)?;
        report.push(name, &corpus_stats(&input, &est, counter)?);
        let templates: Vec<&str> = {
            let mut t: Vec<&str> = self.cfg.languages.iter().map(|l| self.cfg.templates.for_language(l)).collect();
            t.dedup();
            t
        };
        let stages = [
            (REPHRASED_DIR, format!("{name} rephrased ({})", templates.join(", "))),
            (FILTERED_DIR, format!("{name} filtered")),
            (MIX_DIR, format!("{name} mix")),
        ];
        for (dir, label) in stages {
            let path = self.dir(dir).join(MANIFEST_FILE);
            if path.is_file() {
                let corpus = Corpus::open(&path, &est)?;
                report.push(&label, &corpus_stats(&corpus, &est, counter)?);
            }
        }
        let work = self.cfg.work_dir();
        fs::create_dir_all(&work).map_err(|e| CorpusError::io(&work, e))?;
        report.save(&work.join("stats.json"), &work.join("stats.txt"))?;
        Ok(report)
    }

    pub fn run_all(&self) -> Result<RunSummary, PipelineError> {
        let backend = build_backend(&self.cfg)?;
        self.run_all_with(backend.as_ref())
    }

    pub fn run_all_with(&self, backend: &dyn CompletionBackend) -> Result<RunSummary, PipelineError> {
        let preprocess = self.preprocess()?;
        let throughput = self.rephrase_with(backend)?;
        let postprocess = self.postprocess()?;
        let filter = if self.cfg.filter.enabled {
            if self.cfg.filter.scorer == ScorerKind::AskLlm {
                self.score_with(backend)?;
            }
            Some(self.filter(None)?)
        } else {
            None
        };
        let mix = match self.cfg.mix {
            Some(_) => Some(self.mix()?),
            None => None,
        };
        let stats = self.stats()?;
        Ok(RunSummary {
            preprocess,
            throughput,
            postprocess,
            filter,
            mix,
            stats,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{corpus, SyntheticSpec};

    fn setup(docs: usize) -> (tempfile::TempDir, Pipeline) {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("input");
        let spec = SyntheticSpec {
            docs,
            seed: 5,
            ..Default::default()
        };
        write_corpus(&input, "input", "", &corpus(&spec), 25, &TokenEstimator::default()).unwrap();
        let cfg = PipelineConfig {
            base_dir: dir.path().to_path_buf(),
            input: "input".into(),
            work_dir: "work".into(),
            ..Default::default()
        };
        (dir, Pipeline::new(cfg).unwrap())
    }

    #[test]
    fn stages_chain_and_reconcile() {
        let (_dir, p) = setup(40);
        let pre = p.preprocess().unwrap();
        assert_eq!(pre.docs, 40);
        let tp = p.rephrase().unwrap();
        assert_eq!(tp.jobs as u64, pre.passages);
        let post = p.postprocess().unwrap();
        let dropped: u64 = post.dropped_docs.values().sum();
        assert_eq!(post.input_docs, post.output_docs + dropped);
        let audit: Vec<AuditRecord> = read_jsonl(&p.dir(REPHRASED_DIR).join("audit.jsonl"))
            .unwrap()
            .records;
        assert_eq!(audit.iter().filter(|a| a.index.is_none()).count() as u64, dropped);
        let stats = p.stats().unwrap();
        assert_eq!(stats.rows.len(), 2);
        assert_eq!(stats.rows[1].docs, post.output_docs);
    }

    #[test]
    fn stage_inputs_are_required() {
        let (_dir, p) = setup(5);
        let err = p.rephrase().unwrap_err();
        assert!(matches!(err, PipelineError::MissingInput { .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn mismatched_upstream_is_refused() {
        let (dir, p) = setup(5);
        p.preprocess().unwrap();
        let mut cfg = p.cfg.clone();
        cfg.split.max_tokens = 300.0;
        let changed = Pipeline::new(cfg).unwrap();
        let err = changed.rephrase().unwrap_err();
        assert!(matches!(err, PipelineError::Fingerprint { .. }), "{err}");
        assert_eq!(err.exit_code(), 1);
        drop(dir);
    }

    #[test]
    fn filter_without_scores_lists_ids() {
        let (_dir, p) = setup(6);
        p.preprocess().unwrap();
        p.rephrase().unwrap();
        p.postprocess().unwrap();
        let err = p.filter(Some(0.97)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("doc-"), "{err}");
        p.score().unwrap();
        let report = p.filter(Some(0.97)).unwrap();
        let all = p.filter(Some(-1.0)).unwrap();
        assert!(report.kept_docs <= all.kept_docs);
    }

    #[test]
    fn auth_failure_exits_with_backend_code() {
        let (_dir, p) = setup(5);
        p.preprocess().unwrap();
        let backend = MockBackend::echo().auth_failure();
        let err = p.rephrase_with(&backend).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
