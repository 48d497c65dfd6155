//! Passage splitting.
//!
//! Documents are split on line breaks, empty segments dropped, segments over
//! the token budget split after sentence terminators (`.`, `!`, `?` followed
//! by whitespace), and the resulting chunks greedily merged left to right up
//! to the budget. When a merge would overflow, the accumulator is emitted and
//! a new one starts with the chunk that did not fit.

use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::Document;
use crate::token_estimator::TokenEstimator;

pub const DEFAULT_MAX_TOKENS: f64 = 350.0;
pub const DEFAULT_MIN_TOKENS: f64 = 50.0;
pub const DEFAULT_SENTENCE_END: &str = r"([.!?])\s+";

/// Joins chunks merged into one passage.
pub const CHUNK_SEPARATOR: &str = " ";

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("min_tokens ({min}) must be positive and below max_tokens ({max})")]
    Bounds { min: f64, max: f64 },
    #[error("invalid sentence-end pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("line-break pattern must not be empty")]
    EmptyLinebreak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub max_tokens: f64,
    pub min_tokens: f64,
    pub linebreak: String,
    /// The left chunk keeps the text up to the end of capture group 1 (or
    /// the match start when the pattern has no group).
    pub sentence_end: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            min_tokens: DEFAULT_MIN_TOKENS,
            linebreak: "\n".to_string(),
            sentence_end: DEFAULT_SENTENCE_END.to_string(),
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        if !(self.min_tokens > 0.0 && self.min_tokens < self.max_tokens) {
            return Err(SplitError::Bounds {
                min: self.min_tokens,
                max: self.max_tokens,
            });
        }
        if self.linebreak.is_empty() {
            return Err(SplitError::EmptyLinebreak);
        }
        Regex::new(&self.sentence_end)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitFlag {
    /// Over `max_tokens` with no interior sentence boundary to split at.
    OversizeUnsplittable,
    /// Below `min_tokens`: a tail that could not be appended back, a chunk
    /// stranded by the greedy merge, or a document that is short overall.
    UndersizeTail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub index: u32,
    pub lang: String,
    pub text: String,
    pub est_tokens: f64,
    pub split_flags: BTreeSet<SplitFlag>,
}

/// One merged passage as a range of chunk indices.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeGroup {
    pub start: usize,
    pub end: usize,
    pub est_tokens: f64,
    pub flags: BTreeSet<SplitFlag>,
}

/// Greedy merge over chunk estimates.
///
/// `separator` is the estimate of the joiner placed between merged chunks,
/// so a group's estimate equals the estimate of its joined text. A final
/// accumulator under `min_tokens` is appended to the previous group when the
/// result stays within `max_tokens` (or the previous group is already
/// oversize); otherwise it stands alone, flagged.
pub fn plan_merge(lengths: &[f64], separator: f64, cfg: &SplitConfig) -> Vec<MergeGroup> {
    let mut groups: Vec<(usize, usize, f64)> = Vec::new();
    let mut acc: Option<(usize, f64)> = None;
    for (i, &len) in lengths.iter().enumerate() {
        acc = Some(match acc {
            None => (i, len),
            Some((start, est)) if est + separator + len > cfg.max_tokens => {
                groups.push((start, i, est));
                (i, len)
            }
            Some((start, est)) => (start, est + separator + len),
        });
    }
    if let Some((start, est)) = acc {
        let appended = match groups.last_mut() {
            Some(prev)
                if est < cfg.min_tokens
                    && (prev.2 + separator + est <= cfg.max_tokens || prev.2 > cfg.max_tokens) =>
            {
                prev.1 = lengths.len();
                prev.2 += separator + est;
                true
            }
            _ => false,
        };
        if !appended {
            groups.push((start, lengths.len(), est));
        }
    }
    groups
        .into_iter()
        .map(|(start, end, est_tokens)| {
            let mut flags = BTreeSet::new();
            if est_tokens > cfg.max_tokens {
                flags.insert(SplitFlag::OversizeUnsplittable);
            }
            if est_tokens < cfg.min_tokens {
                flags.insert(SplitFlag::UndersizeTail);
            }
            MergeGroup {
                start,
                end,
                est_tokens,
                flags,
            }
        })
        .collect()
}

/// Compiled splitting rules.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    cfg: SplitConfig,
    sentence_end: Regex,
}

impl Preprocessor {
    pub fn new(cfg: SplitConfig) -> Result<Self, SplitError> {
        cfg.validate()?;
        let sentence_end = Regex::new(&cfg.sentence_end)?;
        Ok(Self { cfg, sentence_end })
    }

    pub fn config(&self) -> &SplitConfig {
        &self.cfg
    }

    /// Maximal non-empty runs between line breaks, whitespace-trimmed.
    pub fn split_on_linebreaks<'a>(&self, text: &'a str) -> Vec<&'a str> {
        text.split(self.cfg.linebreak.as_str())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Splits a segment over `max_tokens` after every sentence terminator.
    /// Segments within budget come back unchanged.
    pub fn split_long_segment<'a>(&self, segment: &'a str, est: &TokenEstimator) -> Vec<&'a str> {
        if est.estimate(segment) <= self.cfg.max_tokens {
            return vec![segment];
        }
        let mut chunks = Vec::new();
        let mut start = 0;
        for caps in self.sentence_end.captures_iter(segment) {
            let whole = caps.get(0).expect("group 0 always matches");
            let cut = caps.get(1).map_or(whole.start(), |g| g.end());
            let chunk = segment[start..cut].trim();
            if !chunk.is_empty() {
                chunks.push(chunk);
            }
            start = whole.end();
        }
        let rest = segment[start..].trim();
        if !rest.is_empty() {
            chunks.push(rest);
        }
        chunks
    }

    /// Greedy merge of chunk texts into passage texts with their flags.
    pub fn merge_chunks(
        &self,
        chunks: &[&str],
        est: &TokenEstimator,
    ) -> Vec<(String, BTreeSet<SplitFlag>)> {
        let lengths: Vec<f64> = chunks.iter().map(|c| est.estimate(c)).collect();
        plan_merge(&lengths, est.estimate(CHUNK_SEPARATOR), &self.cfg)
            .into_iter()
            .map(|g| (chunks[g.start..g.end].join(CHUNK_SEPARATOR), g.flags))
            .collect()
    }

    /// Splits one document; `est` should already be the document language's
    /// view (see [`TokenEstimator::for_language`]).
    pub fn split_document(&self, doc: &Document, est: &TokenEstimator) -> Vec<Passage> {
        let chunks: Vec<&str> = self
            .split_on_linebreaks(&doc.text)
            .into_iter()
            .flat_map(|segment| self.split_long_segment(segment, est))
            .collect();
        self.merge_chunks(&chunks, est)
            .into_iter()
            .enumerate()
            .map(|(i, (text, split_flags))| Passage {
                doc_id: doc.id.clone(),
                index: i as u32,
                lang: doc.lang.clone(),
                est_tokens: est.estimate(&text),
                text,
                split_flags,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pre() -> Preprocessor {
        Preprocessor::new(SplitConfig::default()).unwrap()
    }

    fn est() -> TokenEstimator {
        TokenEstimator::with_ratio(0.25).unwrap()
    }

    fn groups(lengths: &[f64]) -> Vec<(usize, usize, f64)> {
        plan_merge(lengths, 0.0, &SplitConfig::default())
            .into_iter()
            .map(|g| (g.start, g.end, g.est_tokens))
            .collect()
    }

    #[test]
    fn linebreak_examples() {
        let p = pre();
        assert_eq!(p.split_on_linebreaks("a\nb"), ["a", "b"]);
        assert_eq!(p.split_on_linebreaks("a\n\n\nb"), ["a", "b"]);
        assert_eq!(p.split_on_linebreaks("a"), ["a"]);
        assert_eq!(p.split_on_linebreaks("a\r\n  \r\nb\r\n"), ["a", "b"]);
        assert!(p.split_on_linebreaks("\n\n").is_empty());
    }

    #[test]
    fn short_segment_untouched() {
        let p = pre();
        let seg = "x".repeat(400); // 100 est tokens
        assert_eq!(p.split_long_segment(&seg, &est()), [seg.as_str()]);
    }

    #[test]
    fn long_segment_split_at_terminators() {
        let p = pre();
        // three ~133-token sentences
        let s1 = format!("{}.", "a".repeat(531));
        let s2 = format!("{}!", "b".repeat(531));
        let s3 = format!("{}?", "c".repeat(531));
        let seg = format!("{s1} {s2}\t {s3}");
        assert!(est().estimate(&seg) > 350.0);
        assert_eq!(p.split_long_segment(&seg, &est()), [s1.as_str(), s2.as_str(), s3.as_str()]);
    }

    #[test]
    fn terminator_without_whitespace_is_not_a_split_point() {
        let p = pre();
        let seg = format!("{}.{}", "a".repeat(1000), "b".repeat(1000)); // 500 est
        let chunks = p.split_long_segment(&seg, &est());
        assert_eq!(chunks, [seg.as_str()]);
        let merged = p.merge_chunks(&chunks, &est());
        assert!(merged[0].1.contains(&SplitFlag::OversizeUnsplittable));
    }

    #[test]
    fn merge_examples() {
        assert_eq!(groups(&[200.0, 200.0]), [(0, 1, 200.0), (1, 2, 200.0)]);
        assert_eq!(groups(&[100.0, 100.0, 100.0]), [(0, 3, 300.0)]);
        // undersize tail that cannot be appended without overflowing stays alone
        let g = plan_merge(&[340.0, 30.0], 0.0, &SplitConfig::default());
        assert_eq!(g.len(), 2);
        assert!(g[0].flags.is_empty());
        assert_eq!(g[1].flags, BTreeSet::from([SplitFlag::UndersizeTail]));
    }

    #[test]
    fn tail_appends_to_oversize_passage() {
        let g = plan_merge(&[500.0, 30.0], 0.0, &SplitConfig::default());
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].est_tokens, 530.0);
        assert_eq!(g[0].flags, BTreeSet::from([SplitFlag::OversizeUnsplittable]));
    }

    #[test]
    fn new_merge_starts_with_the_chunk_that_overflowed() {
        assert_eq!(
            groups(&[300.0, 100.0, 100.0, 100.0, 100.0]),
            [(0, 1, 300.0), (1, 4, 300.0), (4, 5, 100.0)]
        );
    }

    #[test]
    fn separator_counts_toward_budget() {
        let g = plan_merge(&[175.0, 175.0], 0.25, &SplitConfig::default());
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn document_examples() {
        let p = pre();
        let e = est();
        let text = format!("  {}  ", "w".repeat(480)); // 120 est
        let doc = Document::new("d", text.clone(), "en");
        let passages = p.split_document(&doc, &e);
        assert_eq!(passages.len(), 1);
        assert_eq!(passages[0].text, text.trim());
        assert!(passages[0].split_flags.is_empty());

        let tiny = Document::new("t", "y".repeat(80), "en"); // 20 est
        let passages = p.split_document(&tiny, &e);
        assert_eq!(passages.len(), 1);
        assert!(passages[0].split_flags.contains(&SplitFlag::UndersizeTail));
    }

    #[test]
    fn ten_paragraphs_of_sixty_tokens() {
        let p = pre();
        let e = est();
        // 239 chars + 1 separator char per join: 59.75 + 0.25 = 60 per paragraph
        let para = "p".repeat(239);
        let text = [para.as_str(); 10].join("\n");
        let passages = p.split_document(&Document::new("d", text, "en"), &e);
        // 5 paragraphs: 5*59.75 + 4*0.25 = 299.75; a sixth would be 359.75
        let ests: Vec<f64> = passages.iter().map(|p| p.est_tokens).collect();
        assert_eq!(ests, [299.75, 299.75]);
        assert!(passages.iter().all(|p| p.split_flags.is_empty()));
        assert_eq!(passages[1].index, 1);
    }

    #[test]
    fn invalid_config() {
        let bad = SplitConfig {
            min_tokens: 400.0,
            ..Default::default()
        };
        assert!(matches!(Preprocessor::new(bad), Err(SplitError::Bounds { .. })));
        let bad = SplitConfig {
            sentence_end: "(".into(),
            ..Default::default()
        };
        assert!(matches!(Preprocessor::new(bad), Err(SplitError::Pattern(_))));
    }

    fn non_ws(s: &str) -> String {
        s.chars().filter(|c| !c.is_whitespace()).collect()
    }

    proptest! {
        #[test]
        fn split_invariants(
            paragraphs in proptest::collection::vec(
                proptest::collection::vec("[a-zäöüéñ]{1,40}[.!?]?", 1..80),
                1..12,
            ),
            ratio in 0.1f64..0.6,
        ) {
            let text = paragraphs
                .iter()
                .map(|words| words.join(" "))
                .collect::<Vec<_>>()
                .join("\n\n");
            let doc = Document::new("d", text.clone(), "de");
            let e = TokenEstimator::with_ratio(ratio).unwrap();
            let p = pre();
            let passages = p.split_document(&doc, &e);

            let joined: String = passages.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(non_ws(&joined), non_ws(&text));

            let whole = e.estimate(&text);
            for (i, passage) in passages.iter().enumerate() {
                prop_assert_eq!(passage.index as usize, i);
                prop_assert_eq!(passage.est_tokens, e.estimate(&passage.text));
                prop_assert!(passage.est_tokens <= 350.0
                    || passage.split_flags.contains(&SplitFlag::OversizeUnsplittable));
                prop_assert!(passage.est_tokens >= 50.0
                    || passage.split_flags.contains(&SplitFlag::UndersizeTail)
                    || whole < 50.0);
            }
            prop_assert_eq!(p.split_document(&doc, &e), passages);
        }

        #[test]
        fn in_bounds_single_passages_are_a_fixpoint(len in 200usize..1400) {
            let e = est();
            let text = format!("{}.", "z".repeat(len - 1));
            let doc = Document::new("d", text.clone(), "en");
            let passages = pre().split_document(&doc, &e);
            prop_assert_eq!(passages.len(), 1);
            prop_assert_eq!(&passages[0].text, &text);
        }
    }
}
