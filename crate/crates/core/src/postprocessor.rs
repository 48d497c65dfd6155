//! Completion cleanup, passage filtering and document reassembly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{Document, Provenance};
use crate::prompt_engine::{ExtractionMode, CLOSE_TAG};
use crate::util::derive_seed;

pub const DEFAULT_MIN_PASSAGE_CHARS: usize = 50;
pub const DEFAULT_MAX_PASSAGE_CHARS: usize = 5000;
pub const DEFAULT_MIN_DOCUMENT_CHARS: usize = 100;
/// Joins accepted passages of one document.
pub const PASSAGE_SEPARATOR: &str = "\n";

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("invalid pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        source: regex::Error,
    },
    #[error("reading pattern file {path}: {message}")]
    PatternFile { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Legacy,
    Tagged,
}

impl Regime {
    pub fn for_mode(mode: ExtractionMode) -> Option<Self> {
        match mode {
            ExtractionMode::Legacy => Some(Regime::Legacy),
            ExtractionMode::Tagged => Some(Regime::Tagged),
            ExtractionMode::Choice => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TooShort,
    TooLong,
    TruncatedAlpha,
    EmptyAfterClean,
    /// The inference job failed; there is no completion to clean.
    InferenceFailed,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::TooShort => "too_short",
            Rejection::TooLong => "too_long",
            Rejection::TruncatedAlpha => "truncated_alpha",
            Rejection::EmptyAfterClean => "empty_after_clean",
            Rejection::InferenceFailed => "inference_failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanedPassage {
    pub doc_id: String,
    pub index: u32,
    pub text: String,
    pub regime: Regime,
    pub rejection: Option<Rejection>,
}

impl CleanedPassage {
    pub fn accepted(&self) -> bool {
        self.rejection.is_none()
    }
}

/// Patterns for the legacy regime: `markers` separate alternative
/// paraphrases (matched at line starts), `strip` is removed everywhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    pub markers: Vec<String>,
    pub strip: Vec<String>,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            markers: vec![
                r"(?im)^[ \t]*toddler-friendly paraphrase[ \t]*(?:#?[ \t]*\d+)?[ \t]*:".into(),
                r"(?im)^[ \t]*erudite paraphrase[ \t]*(?:#?[ \t]*\d+)?[ \t]*:".into(),
                r"(?im)^[ \t]*paraphrase[ \t]*(?:#?[ \t]*\d+)?[ \t]*:".into(),
                r"(?im)^[ \t]*(?:alternative|option|version|variant)[ \t]*#?[ \t]*\d+[ \t]*:".into(),
            ],
            strip: vec![
                r"</s>".into(),
                r"<s>".into(),
                r"\[/?INST\]".into(),
                r"(?i)(?:toddler-friendly |erudite )?paraphrase(?:[ \t]*#?[ \t]*\d+)?[ \t]*:".into(),
            ],
        }
    }
}

impl PatternConfig {
    pub fn load(path: &Path) -> Result<Self, PostprocessError> {
        let err = |message: String| PostprocessError::PatternFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        toml::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub regime: Regime,
    pub min_passage_chars: usize,
    pub max_passage_chars: usize,
    pub min_document_chars: usize,
    /// TOML file overriding [`PatternConfig`], relative to the config file.
    pub patterns_file: Option<String>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Tagged,
            min_passage_chars: DEFAULT_MIN_PASSAGE_CHARS,
            max_passage_chars: DEFAULT_MAX_PASSAGE_CHARS,
            min_document_chars: DEFAULT_MIN_DOCUMENT_CHARS,
            patterns_file: None,
        }
    }
}

/// Compiled postprocessing rules.
#[derive(Clone, Debug)]
pub struct Postprocessor {
    cfg: PostprocessConfig,
    markers: Vec<Regex>,
    strip: Vec<Regex>,
    seed: u64,
}

fn compile(patterns: &[String]) -> Result<Vec<Regex>, PostprocessError> {
    patterns
        .iter()
        .map(|p| {
            Regex::new(p).map_err(|source| PostprocessError::Pattern {
                pattern: p.clone(),
                source,
            })
        })
        .collect()
}

/// Text up to the first `</text>` (or all of it), trimmed, with the
/// template's forced answer prefix re-attached.
pub fn extract_tagged(raw: &str, completion_prefix: Option<&str>) -> String {
    let inner = raw.find(CLOSE_TAG).map_or(raw, |end| &raw[..end]).trim();
    match completion_prefix {
        Some(prefix) if !inner.is_empty() => format!("{prefix}{inner}"),
        _ => inner.to_string(),
    }
}

impl Postprocessor {
    pub fn new(cfg: PostprocessConfig, patterns: &PatternConfig, seed: u64) -> Result<Self, PostprocessError> {
        Ok(Self {
            markers: compile(&patterns.markers)?,
            strip: compile(&patterns.strip)?,
            cfg,
            seed,
        })
    }

    pub fn config(&self) -> &PostprocessConfig {
        &self.cfg
    }

    /// Splits on paraphrase markers, keeps one alternative chosen by a RNG
    /// seeded from `(seed, doc_id, index)`, then strips unwanted patterns.
    pub fn clean_legacy(&self, raw: &str, doc_id: &str, index: u32) -> String {
        let mut cuts: Vec<(usize, usize)> = self
            .markers
            .iter()
            .flat_map(|re| re.find_iter(raw).map(|m| (m.start(), m.end())))
            .collect();
        cuts.sort_unstable();
        // drop overlapping hits from different marker patterns
        let mut markers: Vec<(usize, usize)> = Vec::with_capacity(cuts.len());
        for cut in cuts {
            if markers.last().is_none_or(|last| cut.0 >= last.1) {
                markers.push(cut);
            }
        }

        let survivor = if markers.is_empty() {
            raw
        } else {
            let blocks: Vec<&str> = markers
                .iter()
                .enumerate()
                .map(|(i, &(_, end))| {
                    let next = markers.get(i + 1).map_or(raw.len(), |m| m.0);
                    raw[end..next].trim()
                })
                .filter(|b| !b.is_empty())
                .collect();
            match blocks.len() {
                0 => "",
                1 => blocks[0],
                n => {
                    let index_str = index.to_string();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[doc_id, &index_str]));
                    blocks[rng.gen_range(0..n)]
                }
            }
        };

        let mut text = survivor.to_string();
        for re in &self.strip {
            text = re.replace_all(&text, "").into_owned();
        }
        text.trim().to_string()
    }

    /// Length and truncation checks on a cleaned passage.
    pub fn filter_passage(&self, text: &str) -> Result<(), Rejection> {
        let chars = text.chars().count();
        if chars == 0 {
            return Err(Rejection::EmptyAfterClean);
        }
        if chars < self.cfg.min_passage_chars {
            return Err(Rejection::TooShort);
        }
        if chars > self.cfg.max_passage_chars {
            return Err(Rejection::TooLong);
        }
        if text.chars().next_back().is_some_and(char::is_alphabetic) {
            return Err(Rejection::TruncatedAlpha);
        }
        Ok(())
    }

    /// Cleans and filters one raw completion. Every input yields exactly one
    /// verdict.
    pub fn process(
        &self,
        doc_id: &str,
        index: u32,
        raw: &str,
        completion_prefix: Option<&str>,
    ) -> CleanedPassage {
        let text = match self.cfg.regime {
            Regime::Legacy => self.clean_legacy(raw, doc_id, index),
            Regime::Tagged => extract_tagged(raw, completion_prefix),
        };
        let rejection = self.filter_passage(&text).err();
        CleanedPassage {
            doc_id: doc_id.to_string(),
            index,
            text,
            regime: self.cfg.regime,
            rejection,
        }
    }

    /// A failed inference job still gets a verdict.
    pub fn failed(&self, doc_id: &str, index: u32) -> CleanedPassage {
        CleanedPassage {
            doc_id: doc_id.to_string(),
            index,
            text: String::new(),
            regime: self.cfg.regime,
            rejection: Some(Rejection::InferenceFailed),
        }
    }

    /// Joins the accepted passages of one document (sorted by index).
    /// Returns `None` when nothing survives or the result is under the
    /// minimum document length.
    pub fn assemble_document(
        &self,
        source: &Document,
        passages: &[CleanedPassage],
        provenance: Provenance,
    ) -> Result<Document, DocumentDrop> {
        let accepted: Vec<&str> = passages
            .iter()
            .filter(|p| p.accepted())
            .map(|p| p.text.as_str())
            .collect();
        if accepted.is_empty() {
            return Err(DocumentDrop::NoAcceptedPassages);
        }
        let text = accepted.join(PASSAGE_SEPARATOR);
        if text.chars().count() < self.cfg.min_document_chars {
            return Err(DocumentDrop::TooShort);
        }
        Ok(Document {
            id: source.id.clone(),
            text,
            lang: source.lang.clone(),
            meta: source.meta.clone(),
            provenance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentDrop {
    NoAcceptedPassages,
    TooShort,
}

impl DocumentDrop {
    pub fn as_str(self) -> &'static str {
        match self {
            DocumentDrop::NoAcceptedPassages => "document_no_accepted_passages",
            DocumentDrop::TooShort => "document_too_short",
        }
    }
}

/// One line of the audit shard. `index` is absent for document-level drops.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub doc_id: String,
    pub index: Option<u32>,
    pub reason: String,
}
