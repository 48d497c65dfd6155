//! Single-file pipeline configuration and stage fingerprints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::DEFAULT_LANGUAGES;
use crate::inference::BackendConfig;
use crate::mixer::MixSpec;
use crate::postprocessor::{PatternConfig, PostprocessConfig, Regime};
use crate::preprocessor::SplitConfig;
use crate::prompt_engine::{
    CustomTemplateSpec, ExtractionMode, TemplateRegistry, QA_OPT_DE, QA_OPT_EN, QA_OPT_ES, QA_OPT_IT,
};
use crate::quality_filter::ScoreSettings;
use crate::token_estimator::{
    CalibrationSettings, DEFAULT_MIN_DOCS_PER_LANGUAGE, DEFAULT_SAMPLE_SIZE, DEFAULT_TOKENS_PER_CHAR,
    MAX_TOKENS_PER_CHAR,
};
use crate::util::sha256_hex;

pub const DEFAULT_SHARD_SIZE: usize = 10_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub default_ratio: f64,
    pub sample_size: usize,
    pub per_language: bool,
    pub min_docs_per_language: usize,
    /// External exact token counter, e.g. `["python3", "count.py"]`.
    pub counter_command: Option<Vec<String>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            default_ratio: DEFAULT_TOKENS_PER_CHAR,
            sample_size: DEFAULT_SAMPLE_SIZE,
            per_language: true,
            min_docs_per_language: DEFAULT_MIN_DOCS_PER_LANGUAGE,
            counter_command: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    /// Template for languages without an entry in `by_language`.
    pub default: String,
    pub by_language: BTreeMap<String, String>,
    pub custom: Vec<CustomTemplateSpec>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            default: QA_OPT_EN.to_string(),
            by_language: [("en", QA_OPT_EN), ("de", QA_OPT_DE), ("it", QA_OPT_IT), ("es", QA_OPT_ES)]
                .into_iter()
                .map(|(l, t)| (l.to_string(), t.to_string()))
                .collect(),
            custom: Vec::new(),
        }
    }
}

impl TemplateConfig {
    pub fn for_language(&self, lang: &str) -> &str {
        self.by_language.get(lang).unwrap_or(&self.default)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    AskLlm,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Whether `run-all` scores and filters.
    pub enabled: bool,
    pub scorer: ScorerKind,
    /// Keep documents scoring strictly above this.
    pub threshold: f64,
    /// Corpus to score and filter: a path or `@input` / `@rephrased`.
    pub corpus: String,
    /// `(doc_id, score)` JSON Lines for the external scorer.
    pub external_scores: Option<String>,
    pub external_name: String,
    pub ask_llm: ScoreSettings,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scorer: ScorerKind::AskLlm,
            threshold: 0.6,
            corpus: "@rephrased".into(),
            external_scores: None,
            external_name: "fwe".into(),
            ask_llm: ScoreSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Stage outputs live under this directory.
    pub work_dir: String,
    /// Input corpus: manifest, shard directory or single shard.
    pub input: String,
    pub dataset_name: String,
    pub languages: Vec<String>,
    pub shard_size: usize,
    pub split: SplitConfig,
    pub estimator: EstimatorConfig,
    pub templates: TemplateConfig,
    pub backend: BackendConfig,
    pub postprocess: PostprocessConfig,
    pub filter: FilterConfig,
    pub mix: Option<MixSpec>,
    /// Directory relative paths resolve against (the config file's).
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            work_dir: "work".into(),
            input: "input".into(),
            dataset_name: "input".into(),
            languages: DEFAULT_LANGUAGES.iter().map(|l| l.to_string()).collect(),
            shard_size: DEFAULT_SHARD_SIZE,
            split: SplitConfig::default(),
            estimator: EstimatorConfig::default(),
            templates: TemplateConfig::default(),
            backend: BackendConfig::default(),
            postprocess: PostprocessConfig::default(),
            filter: FilterConfig::default(),
            mix: None,
            base_dir: PathBuf::from("."),
        }
    }
}

/// One fingerprint per stage, each covering its own settings plus the
/// upstream fingerprint. A stage refuses inputs whose manifest fingerprint
/// differs from the upstream value computed from the current config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub preprocess: String,
    pub rephrase: String,
    pub postprocess: String,
    pub filter: String,
    pub mix: String,
}

fn chain<T: Serialize>(upstream: &str, stage: &str, value: &T) -> String {
    let body = serde_json::to_string(value).expect("config serializes");
    sha256_hex(format!("{upstream}\n{stage}\n{body}").as_bytes())
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(invalid)?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml(&text, &base)
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.work_dir)
    }

    pub fn calibration_settings(&self) -> CalibrationSettings {
        CalibrationSettings {
            seed: self.seed,
            sample_size: self.estimator.sample_size,
            per_language: self.estimator.per_language,
            min_docs_per_language: self.estimator.min_docs_per_language,
            default_ratio: self.estimator.default_ratio,
        }
    }

    /// Built-in plus custom templates, at the backend temperature.
    pub fn registry(&self) -> Result<TemplateRegistry, ConfigError> {
        let mut registry = TemplateRegistry::builtin().with_temperature(self.backend.temperature);
        for spec in &self.templates.custom {
            registry.register(spec.load(&self.base_dir).map_err(invalid)?).map_err(invalid)?;
        }
        Ok(registry)
    }

    pub fn patterns(&self) -> Result<PatternConfig, ConfigError> {
        match &self.postprocess.patterns_file {
            Some(file) => PatternConfig::load(&self.resolve(file)).map_err(invalid),
            None => Ok(PatternConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.languages.is_empty() {
            return Err(invalid("languages must not be empty"));
        }
        if self.shard_size == 0 {
            return Err(invalid("shard_size must be positive"));
        }
        self.split.validate().map_err(invalid)?;
        let ratio = self.estimator.default_ratio;
        if !(ratio > 0.0 && ratio < MAX_TOKENS_PER_CHAR) {
            return Err(invalid(format!(
                "estimator.default_ratio {ratio} outside (0, {MAX_TOKENS_PER_CHAR})"
            )));
        }
        if self.estimator.sample_size == 0 {
            return Err(invalid("estimator.sample_size must be positive"));
        }
        if self.estimator.counter_command.as_ref().is_some_and(|c| c.is_empty()) {
            return Err(invalid("estimator.counter_command must not be empty"));
        }
        self.backend.validate().map_err(invalid)?;
        if self.backend.kind == "http" && self.backend.mock_script.is_some() {
            log::warn!("backend.mock_script is ignored for the http backend");
        }

        let registry = self.registry()?;
        let want = Regime::for_mode;
        let mut selected: Vec<&str> = vec![&self.templates.default];
        selected.extend(self.languages.iter().map(|l| self.templates.for_language(l)));
        for id in selected {
            let template = registry.get(id).map_err(invalid)?;
            match want(template.mode) {
                Some(regime) if regime == self.postprocess.regime => {}
                Some(regime) => {
                    return Err(invalid(format!(
                        "template {id} needs the {regime:?} postprocess regime, config selects {:?}",
                        self.postprocess.regime
                    )))
                }
                None => return Err(invalid(format!("template {id} is not a rephrasing template"))),
            }
        }
        let scoring = registry.get(&self.filter.ask_llm.template).map_err(invalid)?;
        if scoring.mode != ExtractionMode::Choice {
            return Err(invalid(format!("scoring template {} is not a choice template", scoring.id)));
        }
        let pp = &self.postprocess;
        if pp.min_passage_chars > pp.max_passage_chars {
            return Err(invalid("postprocess.min_passage_chars exceeds max_passage_chars"));
        }
        self.patterns()?;
        if !self.filter.threshold.is_finite() {
            return Err(invalid("filter.threshold must be finite"));
        }
        if self.filter.scorer == ScorerKind::External && self.filter.external_scores.is_none() {
            return Err(invalid("filter.external_scores is required for the external scorer"));
        }
        if let Some(mix) = &self.mix {
            mix.validate().map_err(invalid)?;
        }
        Ok(())
    }

    /// Template bodies actually used, so editing a custom template file
    /// changes the fingerprint.
    fn selected_bodies(&self) -> Result<BTreeMap<String, String>, ConfigError> {
        let registry = self.registry()?;
        let mut ids: Vec<&str> = vec![&self.templates.default];
        ids.extend(self.languages.iter().map(|l| self.templates.for_language(l)));
        ids.into_iter()
            .map(|id| {
                let t = registry.get(id).map_err(invalid)?;
                Ok((id.to_string(), serde_json::to_string(t).expect("template serializes")))
            })
            .collect()
    }

    pub fn fingerprints(&self) -> Result<Fingerprints, ConfigError> {
        #[derive(Serialize)]
        struct Preprocess<'a> {
            seed: u64,
            languages: &'a [String],
            split: &'a SplitConfig,
            estimator: &'a EstimatorConfig,
        }
        #[derive(Serialize)]
        struct Rephrase<'a> {
            templates: BTreeMap<String, String>,
            by_language: BTreeMap<&'a str, &'a str>,
            kind: &'a str,
            model: &'a str,
            temperature: f64,
            max_output_tokens: u32,
            mock_script: Option<String>,
        }
        #[derive(Serialize)]
        struct Postprocess<'a> {
            cfg: &'a PostprocessConfig,
            patterns: PatternConfig,
        }

        let preprocess = chain(
            "",
            "preprocess",
            &Preprocess {
                seed: self.seed,
                languages: &self.languages,
                split: &self.split,
                estimator: &self.estimator,
            },
        );
        let mock_script = match (&self.backend.kind[..], &self.backend.mock_script) {
            ("mock", Some(file)) => Some(std::fs::read_to_string(self.resolve(file)).map_err(|e| {
                ConfigError::Read {
                    path: file.clone(),
                    message: e.to_string(),
                }
            })?),
            _ => None,
        };
        let rephrase = chain(
            &preprocess,
            "rephrase",
            &Rephrase {
                templates: self.selected_bodies()?,
                by_language: self
                    .languages
                    .iter()
                    .map(|l| (l.as_str(), self.templates.for_language(l)))
                    .collect(),
                kind: &self.backend.kind,
                model: &self.backend.model,
                temperature: self.backend.temperature,
                max_output_tokens: self.backend.max_output_tokens,
                mock_script,
            },
        );
        let postprocess = chain(
            &rephrase,
            "postprocess",
            &Postprocess {
                cfg: &self.postprocess,
                patterns: self.patterns()?,
            },
        );
        let filter = chain(&postprocess, "filter", &self.filter);
        let mix = chain(&filter, "mix", &self.mix);
        Ok(Fingerprints {
            preprocess,
            rephrase,
            postprocess,
            filter,
            mix,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> PipelineConfig {
        PipelineConfig::from_toml(text, Path::new(".")).unwrap()
    }

    #[test]
    fn defaults_validate() {
        let c = cfg("");
        c.validate().unwrap();
        assert_eq!(c.split.max_tokens, 350.0);
        assert_eq!(c.split.min_tokens, 50.0);
        assert_eq!(c.backend.temperature, 0.7);
        assert_eq!(c.templates.for_language("de"), "qa_opt_de");
        assert_eq!(c.templates.for_language("fr"), "qa_opt_en");
    }

    #[test]
    fn regime_must_match_templates() {
        let c = cfg("[templates]\ndefault = \"toddler\"\nby_language = {}\n");
        assert!(c.validate().unwrap_err().to_string().contains("Legacy"));
        let c = cfg("[templates]\ndefault = \"toddler\"\nby_language = {}\n[postprocess]\nregime = \"legacy\"\n");
        c.validate().unwrap();
        let c = cfg("[templates]\ndefault = \"ask_llm\"\nby_language = {}\n");
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(cfg("[split]\nmax_tokens = 40.0\n").validate().is_err());
        assert!(cfg("[estimator]\ndefault_ratio = 2.0\n").validate().is_err());
        assert!(cfg("[backend]\nkind = \"grpc\"\n").validate().is_err());
        assert!(cfg("[filter]\nscorer = \"external\"\n").validate().is_err());
        assert!(cfg("[templates]\ndefault = \"nope\"\n").validate().is_err());
        assert!(PipelineConfig::from_toml("seed = \"x\"", Path::new(".")).is_err());
    }

    #[test]
    fn fingerprints_track_relevant_fields_only() {
        let base = cfg("").fingerprints().unwrap();
        assert_eq!(base, cfg("").fingerprints().unwrap());

        let f = cfg("[backend]\nmax_in_flight = 64\nendpoint = \"http://x\"\n").fingerprints().unwrap();
        assert_eq!(f, base, "operational settings must not change fingerprints");

        let f = cfg("[split]\nmax_tokens = 300.0\n").fingerprints().unwrap();
        assert_ne!(f.preprocess, base.preprocess);
        assert_ne!(f.rephrase, base.rephrase);

        let f = cfg("[backend]\ntemperature = 0.2\n").fingerprints().unwrap();
        assert_eq!(f.preprocess, base.preprocess);
        assert_ne!(f.rephrase, base.rephrase);

        let f = cfg("[postprocess]\nmin_document_chars = 200\n").fingerprints().unwrap();
        assert_eq!(f.rephrase, base.rephrase);
        assert_ne!(f.postprocess, base.postprocess);

        let f = cfg("[filter]\nthreshold = 0.97\n").fingerprints().unwrap();
        assert_eq!(f.postprocess, base.postprocess);
        assert_ne!(f.filter, base.filter);
        assert_ne!(f.mix, base.mix);
    }

    #[test]
    fn custom_templates_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("mine.txt"), "<s>[INST] Say it plainly:\n{text} [/INST]").unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(
            &path,
            "[postprocess]\nregime = \"legacy\"\n[templates]\ndefault = \"mine\"\nby_language = {}\n\
             [[templates.custom]]\nid = \"mine\"\nfile = \"mine.txt\"\nframing = \"mistral_inst\"\nmode = \"legacy\"\nlanguage = \"en\"\n",
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        c.validate().unwrap();
        let before = c.fingerprints().unwrap();
        std::fs::write(dir.path().join("mine.txt"), "<s>[INST] Say it differently:\n{text} [/INST]").unwrap();
        assert_ne!(c.fingerprints().unwrap().rephrase, before.rephrase);
    }
}
