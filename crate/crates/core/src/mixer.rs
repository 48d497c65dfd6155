//! Weighted composition of training corpora.
//!
//! Each source gets a quota of the target size in proportion to its weight.
//! A source at least as large as its quota contributes a seeded random
//! subset; a smaller one is used `floor(quota / size)` times in full plus a
//! seeded subset for the remainder. Sampling is by whole documents.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{write_corpus, write_json, CorpusError, Document, ShardManifest};
use crate::token_estimator::TokenEstimator;
use crate::util::derive_seed;

pub const DEFAULT_SHARD_SIZE: usize = 10_000;
/// Meta key recording which source a mixed document came from.
pub const MIX_SOURCE_KEY: &str = "mix_source";

#[derive(Debug, Error)]
pub enum MixError {
    #[error("mix spec has no sources")]
    NoSources,
    #[error("mix source {0:?} is empty")]
    EmptySource(String),
    #[error("mix source {name:?} has invalid weight {weight}")]
    BadWeight { name: String, weight: f64 },
    #[error("duplicate mix source name {0:?}")]
    DuplicateSource(String),
    #[error("invalid mix target {0}")]
    BadTarget(f64),
    #[error("{expected} source corpora expected, got {found}")]
    SourceCount { expected: usize, found: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixUnit {
    #[default]
    Tokens,
    Documents,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSource {
    pub name: String,
    /// Corpus location: a path, or `@input`, `@rephrased`, `@filtered` for
    /// pipeline stage outputs.
    pub corpus: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixSpec {
    pub sources: Vec<MixSource>,
    pub unit: MixUnit,
    /// Target size in `unit`; defaults to the largest size at which every
    /// source is used at most once.
    pub target: Option<f64>,
    pub seed: u64,
    pub shard_size: usize,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            unit: MixUnit::Tokens,
            target: None,
            seed: 0,
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<(), MixError> {
        if self.sources.is_empty() {
            return Err(MixError::NoSources);
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.sources {
            if !(s.weight.is_finite() && s.weight > 0.0) {
                return Err(MixError::BadWeight {
                    name: s.name.clone(),
                    weight: s.weight,
                });
            }
            if !names.insert(&s.name) {
                return Err(MixError::DuplicateSource(s.name.clone()));
            }
        }
        if let Some(t) = self.target {
            if !(t.is_finite() && t > 0.0) {
                return Err(MixError::BadTarget(t));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CorpusError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourcePlan {
    pub name: String,
    pub weight: f64,
    pub share: f64,
    pub size: f64,
    pub quota: f64,
    pub full_passes: u64,
    /// Amount still drawn as a random subset after the full passes.
    pub remainder: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub unit: MixUnit,
    pub target: f64,
    pub seed: u64,
    pub sources: Vec<SourcePlan>,
}

/// Computes per-source quotas from source sizes (in the spec's unit).
pub fn plan_mix(spec: &MixSpec, sizes: &[f64]) -> Result<MixPlan, MixError> {
    spec.validate()?;
    if sizes.len() != spec.sources.len() {
        return Err(MixError::SourceCount {
            expected: spec.sources.len(),
            found: sizes.len(),
        });
    }
    for (s, &size) in spec.sources.iter().zip(sizes) {
        if size.is_nan() || size <= 0.0 {
            return Err(MixError::EmptySource(s.name.clone()));
        }
    }
    let total_weight: f64 = spec.sources.iter().map(|s| s.weight).sum();
    let shares: Vec<f64> = spec.sources.iter().map(|s| s.weight / total_weight).collect();
    let target = spec.target.unwrap_or_else(|| {
        sizes
            .iter()
            .zip(&shares)
            .map(|(size, share)| size / share)
            .fold(f64::INFINITY, f64::min)
    });
    let sources = spec
        .sources
        .iter()
        .zip(sizes)
        .zip(&shares)
        .map(|((s, &size), &share)| {
            let quota = share * target;
            // guard against 0.9999… passes from the division
            let ratio = quota / size;
            let full_passes = if (ratio - ratio.round()).abs() < 1e-9 {
                ratio.round()
            } else {
                ratio.floor()
            };
            SourcePlan {
                name: s.name.clone(),
                weight: s.weight,
                share,
                size,
                quota,
                full_passes: full_passes as u64,
                remainder: (quota - full_passes * size).max(0.0),
            }
        })
        .collect();
    Ok(MixPlan {
        unit: spec.unit,
        target,
        seed: spec.seed,
        sources,
    })
}

fn doc_size(doc: &Document, unit: MixUnit, est: &TokenEstimator) -> f64 {
    match unit {
        MixUnit::Tokens => est.estimate_in(&doc.lang, &doc.text),
        MixUnit::Documents => 1.0,
    }
}

pub fn source_size(docs: &[Document], unit: MixUnit, est: &TokenEstimator) -> f64 {
    docs.iter().map(|d| doc_size(d, unit, est)).sum()
}

fn tagged(doc: &Document, source: &str, pass: u64) -> Document {
    let mut out = doc.clone();
    out.id = if pass == 0 {
        format!("{source}/{}", doc.id)
    } else {
        format!("{source}/{}#{pass}", doc.id)
    };
    out.meta.insert(MIX_SOURCE_KEY.to_string(), source.to_string());
    out
}

/// Indices of documents drawn for one source: every document per full pass,
/// then a seeded permutation prefix until the remainder is reached.
pub fn draw_source(plan: &SourcePlan, sizes: &[f64], seed: u64) -> Vec<(usize, u64)> {
    let mut drawn: Vec<(usize, u64)> = Vec::new();
    for pass in 0..plan.full_passes {
        drawn.extend((0..sizes.len()).map(|i| (i, pass)));
    }
    if plan.remainder > 0.0 {
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["source", &plan.name])));
        let mut total = 0.0;
        for i in order {
            // stop at whichever side of the quota is closer
            if total + sizes[i] / 2.0 > plan.remainder {
                break;
            }
            total += sizes[i];
            drawn.push((i, plan.full_passes));
        }
    }
    drawn
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub name: String,
    pub weight: f64,
    pub available_docs: u64,
    pub available: f64,
    pub quota: f64,
    pub full_passes: u64,
    pub realized_docs: u64,
    pub realized_tokens: f64,
    pub realized: f64,
    /// Realized mass divided by the weight, relative to the first source
    /// (1.0 means the weights were hit exactly).
    pub ratio_to_first: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub unit: MixUnit,
    pub target: f64,
    pub seed: u64,
    pub total_docs: u64,
    pub total: f64,
    pub sources: Vec<SourceReport>,
}

impl MixReport {
    pub fn render(&self) -> String {
        let unit = match self.unit {
            MixUnit::Tokens => "est. tokens",
            MixUnit::Documents => "docs",
        };
        let mut out = format!("mix target {:.1} {unit}, seed {}\n", self.target, self.seed);
        let _ = writeln!(
            out,
            "{:<20} {:>8} {:>14} {:>14} {:>6} {:>10} {:>14} {:>8}",
            "source", "weight", "available", "quota", "passes", "docs", "realized", "ratio"
        );
        for s in &self.sources {
            let _ = writeln!(
                out,
                "{:<20} {:>8.3} {:>14.1} {:>14.1} {:>6} {:>10} {:>14.1} {:>8.4}",
                s.name, s.weight, s.available, s.quota, s.full_passes, s.realized_docs, s.realized, s.ratio_to_first
            );
        }
        let _ = writeln!(out, "total {} docs, {:.1} {unit}", self.total_docs, self.total);
        out
    }

    pub fn save(&self, json_path: &Path, text_path: &Path) -> Result<(), CorpusError> {
        write_json(json_path, self)?;
        std::fs::write(text_path, self.render()).map_err(|e| CorpusError::io(text_path, e))
    }
}

/// Draws and globally shuffles the mixed corpus in memory.
pub fn mix_documents(
    spec: &MixSpec,
    sources: &[Vec<Document>],
    est: &TokenEstimator,
) -> Result<(Vec<Document>, MixReport), MixError> {
    let sizes: Vec<Vec<f64>> = sources
        .iter()
        .map(|docs| docs.iter().map(|d| doc_size(d, spec.unit, est)).collect())
        .collect();
    let totals: Vec<f64> = sizes.iter().map(|s| s.iter().sum()).collect();
    let plan = plan_mix(spec, &totals)?;

    let mut mixed = Vec::new();
    let mut reports = Vec::with_capacity(sources.len());
    for ((docs, doc_sizes), sp) in sources.iter().zip(&sizes).zip(&plan.sources) {
        let drawn = draw_source(sp, doc_sizes, spec.seed);
        let realized: f64 = drawn.iter().map(|&(i, _)| doc_sizes[i]).sum();
        let realized_tokens: f64 = drawn
            .iter()
            .map(|&(i, _)| est.estimate_in(&docs[i].lang, &docs[i].text))
            .sum();
        reports.push(SourceReport {
            name: sp.name.clone(),
            weight: sp.weight,
            available_docs: docs.len() as u64,
            available: sp.size,
            quota: sp.quota,
            full_passes: sp.full_passes,
            realized_docs: drawn.len() as u64,
            realized_tokens,
            realized,
            ratio_to_first: 0.0,
        });
        mixed.extend(drawn.into_iter().map(|(i, pass)| tagged(&docs[i], &sp.name, pass)));
    }
    let base = reports[0].realized / reports[0].weight;
    for r in &mut reports {
        r.ratio_to_first = if base > 0.0 { r.realized / r.weight / base } else { 0.0 };
    }
    mixed.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["shuffle"])));

    let report = MixReport {
        unit: spec.unit,
        target: plan.target,
        seed: spec.seed,
        total_docs: mixed.len() as u64,
        total: reports.iter().map(|r| r.realized).sum(),
        sources: reports,
    };
    Ok((mixed, report))
}

/// Mixes and writes shards, manifest and report into `out_dir`.
pub fn execute_mix(
    spec: &MixSpec,
    sources: &[Vec<Document>],
    est: &TokenEstimator,
    out_dir: &Path,
    fingerprint: &str,
) -> Result<(ShardManifest, MixReport), MixError> {
    let (docs, report) = mix_documents(spec, sources, est)?;
    let manifest = write_corpus(out_dir, "mix", fingerprint, &docs, spec.shard_size, est)?;
    report.save(&out_dir.join("mix_report.json"), &out_dir.join("mix_report.txt"))?;
    Ok((manifest, report))
}
