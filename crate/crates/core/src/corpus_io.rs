//! Sharded JSON Lines corpora, manifests and Table-1-style statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::token_estimator::{CounterError, TokenCounter, TokenEstimator};

pub const DEFAULT_LANGUAGES: [&str; 4] = ["en", "de", "es", "it"];
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}: file not found", path.display())]
    Missing { path: PathBuf },
    #[error("{}: {count} malformed line(s), first at line {first_line}: {first_message}", path.display())]
    Malformed {
        path: PathBuf,
        count: usize,
        first_line: usize,
        first_message: String,
    },
    #[error("duplicate document id {id:?} in shard {}", path.display())]
    DuplicateId { id: String, path: PathBuf },
    #[error("invalid document {id:?}: {reason}")]
    InvalidDocument { id: String, reason: String },
    #[error("{}: invalid manifest: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
    #[error("exact token counter: {0}")]
    Counter(#[from] CounterError),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    Original,
    Rephrased {
        template_id: String,
        model_id: String,
    },
}

/// One corpus record. Field order is the on-disk field order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub lang: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>, lang: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            lang: lang.into(),
            meta: BTreeMap::new(),
            provenance: Provenance::Original,
        }
    }

    /// Checks the record-level invariants. `languages` empty means any code.
    pub fn validate(&self, languages: &[String]) -> Result<(), CorpusError> {
        let invalid = |reason: &str| CorpusError::InvalidDocument {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if self.text.is_empty() {
            return Err(invalid("empty text"));
        }
        if !languages.is_empty() && !languages.iter().any(|l| l == &self.lang) {
            return Err(invalid(&format!("language {:?} not configured", self.lang)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for LineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Result of reading one shard: the parsed records plus every line that
/// failed, so that `records + errors = lines`.
#[derive(Debug)]
pub struct ShardLoad<T> {
    pub records: Vec<T>,
    pub errors: Vec<LineError>,
}

impl<T> ShardLoad<T> {
    pub fn into_strict(self, path: &Path) -> Result<Vec<T>, CorpusError> {
        match self.errors.first() {
            None => Ok(self.records),
            Some(first) => Err(CorpusError::Malformed {
                path: path.to_path_buf(),
                count: self.errors.len(),
                first_line: first.line,
                first_message: first.message.clone(),
            }),
        }
    }
}

/// Reads any JSON Lines file, collecting per-line parse errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<ShardLoad<T>, CorpusError> {
    let (numbered, errors) = read_jsonl_numbered(path)?;
    Ok(ShardLoad {
        records: numbered.into_iter().map(|(_, r)| r).collect(),
        errors,
    })
}

type Numbered<T> = (Vec<(usize, T)>, Vec<LineError>);

fn read_jsonl_numbered<T: DeserializeOwned>(path: &Path) -> Result<Numbered<T>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push((i + 1, r)),
            Err(e) => errors.push(LineError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((records, errors))
}

/// Writes records one per line through a temporary file and an atomic rename.
pub fn write_jsonl<'a, T, I>(path: &Path, records: I) -> Result<usize, CorpusError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    write_atomically(path, |w| {
        let mut n = 0;
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
            n += 1;
        }
        Ok(n)
    })
}

pub(crate) fn write_atomically<R>(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<R>,
) -> Result<R, CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        let r = body(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(r)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CorpusError::io(path, e)
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    write_atomically(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CorpusError> {
    let bytes = fs::read(path).map_err(|e| CorpusError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        count: 1,
        first_line: e.line(),
        first_message: e.to_string(),
    })
}

/// Loads one document shard. Lines that fail to parse, carry an empty id or
/// text, or repeat an id already seen in the shard are reported as line
/// errors; the caller decides whether to abort.
pub fn load_shard(path: &Path) -> Result<ShardLoad<Document>, CorpusError> {
    let (numbered, mut errors) = read_jsonl_numbered::<Document>(path)?;
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(numbered.len());
    for (line, doc) in numbered {
        if let Err(e) = doc.validate(&[]) {
            errors.push(LineError {
                line,
                message: e.to_string(),
            });
        } else if !seen.insert(doc.id.clone()) {
            errors.push(LineError {
                line,
                message: format!("duplicate document id {:?}", doc.id),
            });
        } else {
            records.push(doc);
        }
    }
    errors.sort_by_key(|e| e.line);
    Ok(ShardLoad { records, errors })
}

/// Per-shard manifest entry. `path` is relative to the manifest directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub path: PathBuf,
    pub docs: u64,
    pub est_tokens: f64,
}

/// Writes a document shard, refusing duplicate ids.
pub fn write_shard<'a, I>(
    docs: I,
    path: &Path,
    estimator: &TokenEstimator,
) -> Result<ShardEntry, CorpusError>
where
    I: IntoIterator<Item = &'a Document>,
{
    let docs: Vec<&Document> = docs.into_iter().collect();
    let mut seen = HashSet::with_capacity(docs.len());
    let mut est_tokens = 0.0;
    for doc in &docs {
        if !seen.insert(doc.id.as_str()) {
            return Err(CorpusError::DuplicateId {
                id: doc.id.clone(),
                path: path.to_path_buf(),
            });
        }
        est_tokens += estimator.estimate_in(&doc.lang, &doc.text);
    }
    let n = write_jsonl(path, docs.iter().copied())?;
    Ok(ShardEntry {
        path: path.to_path_buf(),
        docs: n as u64,
        est_tokens,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub stage: String,
    pub fingerprint: String,
    pub shards: Vec<ShardEntry>,
    pub total_docs: u64,
    pub total_est_tokens: f64,
}

impl ShardManifest {
    pub fn new(stage: &str, fingerprint: &str) -> Self {
        Self {
            stage: stage.to_string(),
            fingerprint: fingerprint.to_string(),
            shards: Vec::new(),
            total_docs: 0,
            total_est_tokens: 0.0,
        }
    }

    /// Adds a shard written at an absolute (or cwd-relative) path, storing it
    /// relative to `manifest_dir`.
    pub fn push(&mut self, mut entry: ShardEntry, manifest_dir: &Path) {
        if let Ok(rel) = entry.path.strip_prefix(manifest_dir) {
            entry.path = rel.to_path_buf();
        }
        self.total_docs += entry.docs;
        self.total_est_tokens += entry.est_tokens;
        self.shards.push(entry);
    }

    pub fn shard_paths(&self, manifest_dir: &Path) -> Vec<PathBuf> {
        self.shards.iter().map(|s| manifest_dir.join(&s.path)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let manifest: ShardManifest = read_json(path)?;
        let sum: u64 = manifest.shards.iter().map(|s| s.docs).sum();
        if sum != manifest.total_docs {
            return Err(CorpusError::Manifest {
                path: path.to_path_buf(),
                reason: format!("shard counts sum to {sum}, total says {}", manifest.total_docs),
            });
        }
        Ok(manifest)
    }

    /// Verifies every listed shard exists, parses cleanly and holds the
    /// recorded number of documents.
    pub fn verify(&self, manifest_dir: &Path) -> Result<(), CorpusError> {
        for (entry, path) in self.shards.iter().zip(self.shard_paths(manifest_dir)) {
            let docs = load_shard(&path)?.into_strict(&path)?;
            if docs.len() as u64 != entry.docs {
                return Err(CorpusError::Manifest {
                    path: path.clone(),
                    reason: format!("manifest says {} docs, shard has {}", entry.docs, docs.len()),
                });
            }
        }
        Ok(())
    }
}

/// A corpus on disk: a manifest plus the directory its shard paths are
/// relative to.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: ShardManifest,
}

impl Corpus {
    /// Opens `path`, which may be a manifest file, a directory containing
    /// `manifest.json`, a directory of `*.jsonl` shards, or a single shard.
    /// Manifest-less inputs get a synthetic manifest with stage `input`.
    pub fn open(path: &Path, estimator: &TokenEstimator) -> Result<Self, CorpusError> {
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            return Ok(Self {
                manifest: ShardManifest::load(path)?,
                dir,
            });
        }
        if path.is_dir() && path.join(MANIFEST_FILE).is_file() {
            return Ok(Self {
                manifest: ShardManifest::load(&path.join(MANIFEST_FILE))?,
                dir: path.to_path_buf(),
            });
        }
        let (dir, files) = if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| CorpusError::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
                .collect();
            files.sort();
            (path.to_path_buf(), files)
        } else if path.is_file() {
            let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
            (dir, vec![path.to_path_buf()])
        } else {
            return Err(CorpusError::Missing {
                path: path.to_path_buf(),
            });
        };
        let mut manifest = ShardManifest::new("input", "");
        for file in files {
            let docs = load_shard(&file)?.into_strict(&file)?;
            let est_tokens = docs
                .iter()
                .map(|d| estimator.estimate_in(&d.lang, &d.text))
                .sum();
            manifest.push(
                ShardEntry {
                    path: file.clone(),
                    docs: docs.len() as u64,
                    est_tokens,
                },
                &dir,
            );
        }
        Ok(Self { dir, manifest })
    }

    pub fn shard_paths(&self) -> Vec<PathBuf> {
        self.manifest.shard_paths(&self.dir)
    }

    /// Loads every document, failing on the first malformed shard.
    pub fn load_all(&self) -> Result<Vec<Document>, CorpusError> {
        let mut docs = Vec::with_capacity(self.manifest.total_docs as usize);
        for path in self.shard_paths() {
            docs.extend(load_shard(&path)?.into_strict(&path)?);
        }
        Ok(docs)
    }
}

/// Writes `docs` as numbered shards of at most `shard_size` documents plus a
/// manifest in `dir`.
pub fn write_corpus(
    dir: &Path,
    stage: &str,
    fingerprint: &str,
    docs: &[Document],
    shard_size: usize,
    estimator: &TokenEstimator,
) -> Result<ShardManifest, CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut manifest = ShardManifest::new(stage, fingerprint);
    let shard_size = shard_size.max(1);
    for (i, chunk) in docs.chunks(shard_size).enumerate() {
        let path = dir.join(format!("shard-{i:05}.jsonl"));
        manifest.push(write_shard(chunk, &path, estimator)?, dir);
    }
    if docs.is_empty() {
        let path = dir.join("shard-00000.jsonl");
        manifest.push(write_shard([], &path, estimator)?, dir);
    }
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountingMethod {
    Estimated,
    ExactExternal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub docs: u64,
    pub tokens: f64,
    pub method: CountingMethod,
}

impl CorpusStats {
    pub fn empty(method: CountingMethod) -> Self {
        Self {
            docs: 0,
            tokens: 0.0,
            method,
        }
    }

    pub fn million_docs(&self) -> f64 {
        self.docs as f64 / 1e6
    }

    pub fn billion_tokens(&self) -> f64 {
        self.tokens / 1e9
    }

    fn add(&mut self, other: &CorpusStats) {
        self.docs += other.docs;
        self.tokens += other.tokens;
    }
}

/// Counts documents exactly and tokens by estimate, or through `counter`
/// when one is supplied. Counts cover document text only.
pub fn corpus_stats(
    corpus: &Corpus,
    estimator: &TokenEstimator,
    counter: Option<&dyn TokenCounter>,
) -> Result<CorpusStats, CorpusError> {
    let method = if counter.is_some() {
        CountingMethod::ExactExternal
    } else {
        CountingMethod::Estimated
    };
    let mut total = CorpusStats::empty(method);
    for path in corpus.shard_paths() {
        total.add(&shard_stats(&path, estimator, counter)?);
    }
    Ok(total)
}

pub fn shard_stats(
    path: &Path,
    estimator: &TokenEstimator,
    counter: Option<&dyn TokenCounter>,
) -> Result<CorpusStats, CorpusError> {
    let docs = load_shard(path)?.into_strict(path)?;
    let (tokens, method) = match counter {
        Some(counter) => {
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let counts = counter.count_tokens(&texts)?;
            (counts.iter().sum::<u64>() as f64, CountingMethod::ExactExternal)
        }
        None => (
            docs.iter()
                .map(|d| estimator.estimate_in(&d.lang, &d.text))
                .sum(),
            CountingMethod::Estimated,
        ),
    };
    Ok(CorpusStats {
        docs: docs.len() as u64,
        tokens,
        method,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub dataset: String,
    pub docs: u64,
    pub tokens: f64,
    pub mio_docs: f64,
    pub b_tokens: f64,
    pub method: CountingMethod,
}

/// Dataset / mio. docs / B tokens report with a JSON twin.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rows: Vec<StatsRow>,
}

impl StatsReport {
    pub fn push(&mut self, dataset: &str, stats: &CorpusStats) {
        self.rows.push(StatsRow {
            dataset: dataset.to_string(),
            docs: stats.docs,
            tokens: stats.tokens,
            mio_docs: stats.million_docs(),
            b_tokens: stats.billion_tokens(),
            method: stats.method,
        });
    }

    pub fn render_table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.dataset.chars().count())
            .chain(std::iter::once("Dataset".len()))
            .max()
            .unwrap_or(7);
        let mut out = format!("{:<width$}  {:>12}  {:>12}\n", "Dataset", "mio. docs", "B tokens");
        out.push_str(&format!("{}\n", "-".repeat(width + 28)));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>12.6}  {:>12.6}\n",
                row.dataset, row.mio_docs, row.b_tokens
            ));
        }
        out
    }

    pub fn save(&self, json_path: &Path, text_path: &Path) -> Result<(), CorpusError> {
        write_json(json_path, self)?;
        let table = self.render_table();
        write_atomically(text_path, |w| w.write_all(table.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn synthetic_docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| {
                let mut d = Document::new(format!("doc-{i}"), format!("Text number {i}. Grüße!"), "de");
                d.meta.insert("url".into(), format!("https://example.org/{i}"));
                if i % 3 == 0 {
                    d.provenance = Provenance::Rephrased {
                        template_id: "qa".into(),
                        model_id: "mock".into(),
                    };
                }
                d
            })
            .collect()
    }

    #[test]
    fn load_three_lines_in_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        fs::write(
            &path,
            "{\"id\":\"1\",\"text\":\"a\",\"lang\":\"en\"}\n{\"id\":\"2\",\"text\":\"b\",\"lang\":\"en\"}\n{\"id\":\"3\",\"text\":\"c\",\"lang\":\"de\"}\n",
        )
        .unwrap();
        let load = load_shard(&path).unwrap();
        let ids: Vec<_> = load.records.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "3"]);
        assert!(load.errors.is_empty());
        assert_eq!(load.records[0].provenance, Provenance::Original);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let load = load_shard(&path).unwrap();
        assert!(load.records.is_empty() && load.errors.is_empty());
    }

    #[test]
    fn malformed_line_is_reported_with_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"id\":\"1\",\"text\":\"a\",\"lang\":\"en\"}\n{not json\n{\"id\":\"2\",\"text\":\"b\",\"lang\":\"en\"}\n",
        )
        .unwrap();
        let load = load_shard(&path).unwrap();
        assert_eq!(load.records.len(), 2);
        assert_eq!(load.errors.len(), 1);
        assert_eq!(load.errors[0].line, 2);
        let err = load.into_strict(&path).unwrap_err();
        assert!(err.to_string().contains("first at line 2"), "{err}");
    }

    #[test]
    fn duplicate_and_empty_fields_are_line_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        fs::write(
            &path,
            "{\"id\":\"1\",\"text\":\"a\",\"lang\":\"en\"}\nxx\n{\"id\":\"1\",\"text\":\"b\",\"lang\":\"en\"}\n{\"id\":\"\",\"text\":\"b\",\"lang\":\"en\"}\n",
        )
        .unwrap();
        let load = load_shard(&path).unwrap();
        assert_eq!(load.records.len(), 1);
        let lines: Vec<_> = load.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, [2, 3, 4]);
    }

    #[test]
    fn missing_file_errors() {
        let err = load_shard(Path::new("/nonexistent/shard.jsonl")).unwrap_err();
        assert!(matches!(err, CorpusError::Missing { .. }));
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let dir = tempdir().unwrap();
        let docs = synthetic_docs(100);
        let est = TokenEstimator::default();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_shard(&docs, &a, &est).unwrap();
        let loaded = load_shard(&a).unwrap().into_strict(&a).unwrap();
        assert_eq!(loaded, docs);
        write_shard(&loaded, &b, &est).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn duplicate_id_on_write_names_it() {
        let dir = tempdir().unwrap();
        let docs = vec![Document::new("x", "a", "en"), Document::new("x", "b", "en")];
        let err = write_shard(&docs, &dir.path().join("d.jsonl"), &TokenEstimator::default())
            .unwrap_err();
        assert!(err.to_string().contains("\"x\""), "{err}");
        assert!(!dir.path().join("d.jsonl").exists());
    }

    #[test]
    fn ten_thousand_docs_manifest_entry() {
        let dir = tempdir().unwrap();
        let docs = synthetic_docs(10_000);
        let entry = write_shard(&docs, &dir.path().join("big.jsonl"), &TokenEstimator::default())
            .unwrap();
        assert_eq!(entry.docs, 10_000);
    }

    #[test]
    fn stats_single_doc() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::with_ratio(0.25).unwrap();
        let docs = vec![Document::new("a", "y".repeat(400), "en")];
        write_corpus(dir.path(), "input", "fp", &docs, 10, &est).unwrap();
        let corpus = Corpus::open(dir.path(), &est).unwrap();
        let stats = corpus_stats(&corpus, &est, None).unwrap();
        assert_eq!(stats.docs, 1);
        assert_eq!(stats.tokens, 100.0);
        assert_eq!(stats.method, CountingMethod::Estimated);
    }

    #[test]
    fn stats_empty_corpus() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::default();
        write_corpus(dir.path(), "input", "fp", &[], 10, &est).unwrap();
        let corpus = Corpus::open(dir.path(), &est).unwrap();
        let stats = corpus_stats(&corpus, &est, None).unwrap();
        assert_eq!((stats.docs, stats.tokens), (0, 0.0));
    }

    #[test]
    fn stats_are_additive_over_shards() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::with_ratio(0.3).unwrap();
        let docs = synthetic_docs(57);
        let manifest = write_corpus(dir.path(), "input", "fp", &docs, 10, &est).unwrap();
        assert_eq!(manifest.shards.len(), 6);
        let corpus = Corpus::open(dir.path(), &est).unwrap();
        let total = corpus_stats(&corpus, &est, None).unwrap();
        let mut docs_sum = 0;
        let mut tok_sum = 0.0;
        for p in corpus.shard_paths() {
            let s = shard_stats(&p, &est, None).unwrap();
            docs_sum += s.docs;
            tok_sum += s.tokens;
        }
        assert_eq!(total.docs, docs_sum);
        assert_eq!(total.tokens, tok_sum);
        assert_eq!(total.docs, manifest.total_docs);
    }

    #[test]
    fn exact_counter_stats() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::default();
        let docs = vec![Document::new("a", "one two", "en"), Document::new("b", "three", "en")];
        write_corpus(dir.path(), "input", "fp", &docs, 10, &est).unwrap();
        let corpus = Corpus::open(dir.path(), &est).unwrap();
        let words = |t: &str| t.split_whitespace().count() as u64;
        let stats = corpus_stats(&corpus, &est, Some(&words)).unwrap();
        assert_eq!(stats.tokens, 3.0);
        assert_eq!(stats.method, CountingMethod::ExactExternal);
    }

    #[test]
    fn manifest_verify_and_sum_check() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::default();
        let manifest = write_corpus(dir.path(), "input", "fp", &synthetic_docs(25), 10, &est).unwrap();
        manifest.verify(dir.path()).unwrap();

        let mut broken = manifest.clone();
        broken.total_docs += 1;
        let path = dir.path().join("broken.json");
        broken.save(&path).unwrap();
        assert!(matches!(ShardManifest::load(&path), Err(CorpusError::Manifest { .. })));

        fs::remove_file(dir.path().join("shard-00001.jsonl")).unwrap();
        assert!(manifest.verify(dir.path()).is_err());
    }

    #[test]
    fn open_directory_without_manifest() {
        let dir = tempdir().unwrap();
        let est = TokenEstimator::default();
        write_shard(&synthetic_docs(3), &dir.path().join("b.jsonl"), &est).unwrap();
        write_shard(&synthetic_docs(2), &dir.path().join("a.jsonl"), &est).unwrap();
        let corpus = Corpus::open(dir.path(), &est).unwrap();
        assert_eq!(corpus.manifest.total_docs, 5);
        assert_eq!(corpus.manifest.shards[0].path, PathBuf::from("a.jsonl"));
    }

    #[test]
    fn table_has_three_columns() {
        let mut report = StatsReport::default();
        report.push(
            "C4 (English)",
            &CorpusStats {
                docs: 365_000_000,
                tokens: 172e9,
                method: CountingMethod::ExactExternal,
            },
        );
        let table = report.render_table();
        let header = table.lines().next().unwrap();
        assert!(header.contains("mio. docs") && header.contains("B tokens"));
        assert!(table.contains("365.000000") && table.contains("172.000000"), "{table}");
    }

    proptest! {
        #[test]
        fn line_accounting(lines in proptest::collection::vec(
            prop_oneof![
                "[a-z]{1,8}".prop_map(|t| format!("{{\"id\":\"{t}\",\"text\":\"x\",\"lang\":\"en\"}}")),
                "[^\n\r]{0,20}",
            ],
            0..40,
        )) {
            let dir = tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            let mut body = lines.join("\n");
            if !lines.is_empty() {
                body.push('\n');
            }
            fs::write(&path, &body).unwrap();
            let load = load_shard(&path).unwrap();
            prop_assert_eq!(load.records.len() + load.errors.len(), lines.len());
        }

        #[test]
        fn write_then_load_is_identity(texts in proptest::collection::vec("\\PC{1,40}", 1..20)) {
            let dir = tempdir().unwrap();
            let docs: Vec<_> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), t.clone(), "it"))
                .collect();
            let path = dir.path().join("p.jsonl");
            write_shard(&docs, &path, &TokenEstimator::default()).unwrap();
            prop_assert_eq!(load_shard(&path).unwrap().into_strict(&path).unwrap(), docs);
        }
    }
}
