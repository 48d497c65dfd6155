//! Prompt templates and rendering.
//!
//! Built-in template bodies live in `templates/*.txt` and are embedded at
//! compile time; their exact bytes are what the model sees, framing tokens
//! (`<s>[INST]`, ChatML markers) included.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocessor::Passage;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const TEXT_PLACEHOLDER: &str = "{text}";
pub const DOCUMENT_PLACEHOLDER: &str = "{document}";
pub const OPTIONS_PLACEHOLDER: &str = "{options}";
pub const OPEN_TAG: &str = "<text>";
pub const CLOSE_TAG: &str = "</text>";
pub const MISTRAL_EOS: &str = "</s>";
pub const CHATML_EOS: &str = "<|im_end|>";

pub const TODDLER: &str = "toddler";
pub const HARD: &str = "hard";
pub const WIKI: &str = "wiki";
pub const QA: &str = "qa";
pub const QA_OPT_EN: &str = "qa_opt_en";
pub const QA_OPT_DE: &str = "qa_opt_de";
pub const QA_OPT_IT: &str = "qa_opt_it";
pub const QA_OPT_ES: &str = "qa_opt_es";
pub const QA_OPT_QWEN2: &str = "qa_opt_qwen2";
pub const ASK_LLM: &str = "ask_llm";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    Unknown(String),
    #[error("template {0:?} is already registered")]
    Duplicate(String),
    #[error("template {id:?}: placeholder {placeholder} must occur exactly once, found {count}")]
    Placeholder {
        id: String,
        placeholder: String,
        count: usize,
    },
    #[error("template {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("template {id:?}: passage text is empty")]
    EmptyPassage { id: String },
    #[error("reading template file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatFraming {
    MistralInst,
    Qwen2Chatml,
    Raw,
}

impl ChatFraming {
    fn opening(self) -> Option<&'static str> {
        match self {
            ChatFraming::MistralInst => Some("<s>[INST]"),
            ChatFraming::Qwen2Chatml => Some("<|im_start|>"),
            ChatFraming::Raw => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionMode {
    /// Marker splitting and pattern stripping.
    Legacy,
    /// Completion starts inside an open `<text>`; keep up to the first close.
    Tagged,
    /// Completion is a single option choice (quality scoring).
    Choice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
    pub framing: ChatFraming,
    pub stop: Vec<String>,
    pub mode: ExtractionMode,
    pub language: String,
    /// Text the assistant prefix forces at the start of the answer; it is
    /// re-attached to the extracted completion.
    #[serde(default)]
    pub completion_prefix: Option<String>,
}

impl PromptTemplate {
    pub fn placeholder(&self) -> &'static str {
        match self.mode {
            ExtractionMode::Choice => DOCUMENT_PLACEHOLDER,
            _ => TEXT_PLACEHOLDER,
        }
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let placeholder = self.placeholder();
        let count = self.body.matches(placeholder).count();
        if count != 1 {
            return Err(TemplateError::Placeholder {
                id: self.id.clone(),
                placeholder: placeholder.to_string(),
                count,
            });
        }
        if self.mode == ExtractionMode::Choice {
            let count = self.body.matches(OPTIONS_PLACEHOLDER).count();
            if count != 1 {
                return Err(TemplateError::Placeholder {
                    id: self.id.clone(),
                    placeholder: OPTIONS_PLACEHOLDER.to_string(),
                    count,
                });
            }
        }
        if let Some(opening) = self.framing.opening() {
            if !self.body.starts_with(opening) {
                return Err(TemplateError::Invalid {
                    id: self.id.clone(),
                    reason: format!("{:?} framing requires the body to start with {opening:?}", self.framing),
                });
            }
        }
        if self.mode == ExtractionMode::Tagged && !ends_inside_open_tag(&self.fill("x")) {
            return Err(TemplateError::Invalid {
                id: self.id.clone(),
                reason: "tagged template must end inside an open <text> region".into(),
            });
        }
        Ok(())
    }

    fn split_body(&self) -> (&str, &str) {
        let placeholder = self.placeholder();
        let at = self.body.find(placeholder).expect("validated placeholder");
        (&self.body[..at], &self.body[at + placeholder.len()..])
    }

    /// Substitutes `text` for the placeholder. The passage is inserted as-is,
    /// so placeholder-like strings inside it are never expanded.
    pub fn fill(&self, text: &str) -> String {
        let (head, tail) = self.split_body();
        let mut out = String::with_capacity(self.body.len() + text.len());
        out.push_str(head);
        out.push_str(text);
        out.push_str(tail);
        out
    }
}

/// True when the last `<text>` is not followed by a `</text>`.
pub fn ends_inside_open_tag(prompt: &str) -> bool {
    match (prompt.rfind(OPEN_TAG), prompt.rfind(CLOSE_TAG)) {
        (Some(open), Some(close)) => open > close,
        (Some(_), None) => true,
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub doc_id: String,
    pub index: u32,
    pub template_id: String,
    pub prompt: String,
    pub stop: Vec<String>,
    pub temperature: f64,
    /// The passage contains a literal `</text>` under a tagged template.
    #[serde(default)]
    pub tag_collision: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub id: String,
    pub language: String,
    pub mode: ExtractionMode,
    pub builtin: bool,
}

#[derive(Clone, Debug)]
pub struct TemplateRegistry {
    templates: BTreeMap<String, (PromptTemplate, bool)>,
    temperature: f64,
}

fn legacy(id: &str, body: &str) -> PromptTemplate {
    PromptTemplate {
        id: id.into(),
        body: body.into(),
        framing: ChatFraming::MistralInst,
        stop: vec![MISTRAL_EOS.into()],
        mode: ExtractionMode::Legacy,
        language: "en".into(),
        completion_prefix: None,
    }
}

fn tagged(id: &str, body: &str, language: &str) -> PromptTemplate {
    PromptTemplate {
        id: id.into(),
        body: body.into(),
        framing: ChatFraming::MistralInst,
        stop: vec![CLOSE_TAG.into(), MISTRAL_EOS.into()],
        mode: ExtractionMode::Tagged,
        language: language.into(),
        completion_prefix: None,
    }
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    vec![
        legacy(TODDLER, include_str!("../templates/toddler.txt")),
        legacy(HARD, include_str!("../templates/hard.txt")),
        legacy(WIKI, include_str!("../templates/wiki.txt")),
        legacy(QA, include_str!("../templates/qa.txt")),
        tagged(QA_OPT_EN, include_str!("../templates/qa_opt_en.txt"), "en"),
        tagged(QA_OPT_DE, include_str!("../templates/qa_opt_de.txt"), "de"),
        tagged(QA_OPT_IT, include_str!("../templates/qa_opt_it.txt"), "it"),
        tagged(QA_OPT_ES, include_str!("../templates/qa_opt_es.txt"), "es"),
        PromptTemplate {
            id: QA_OPT_QWEN2.into(),
            body: include_str!("../templates/qa_opt_qwen2.txt").into(),
            framing: ChatFraming::Qwen2Chatml,
            stop: vec![CLOSE_TAG.into(), CHATML_EOS.into()],
            mode: ExtractionMode::Tagged,
            language: "en".into(),
            completion_prefix: Some("Question:\n".into()),
        },
        PromptTemplate {
            id: ASK_LLM.into(),
            body: include_str!("../templates/ask_llm.txt").into(),
            framing: ChatFraming::Raw,
            stop: vec!["\n".into()],
            mode: ExtractionMode::Choice,
            language: "en".into(),
            completion_prefix: None,
        },
    ]
}

/// Declares a user template backed by a file on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomTemplateSpec {
    pub id: String,
    pub file: String,
    pub framing: ChatFraming,
    pub mode: ExtractionMode,
    pub language: String,
    #[serde(default)]
    pub stop: Option<Vec<String>>,
    #[serde(default)]
    pub completion_prefix: Option<String>,
}

impl CustomTemplateSpec {
    pub fn load(&self, base_dir: &Path) -> Result<PromptTemplate, TemplateError> {
        let path = base_dir.join(&self.file);
        let body = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let stop = self.stop.clone().unwrap_or_else(|| match (self.mode, self.framing) {
            (ExtractionMode::Tagged, ChatFraming::Qwen2Chatml) => {
                vec![CLOSE_TAG.into(), CHATML_EOS.into()]
            }
            (ExtractionMode::Tagged, _) => vec![CLOSE_TAG.into(), MISTRAL_EOS.into()],
            (_, ChatFraming::Qwen2Chatml) => vec![CHATML_EOS.into()],
            _ => vec![MISTRAL_EOS.into()],
        });
        Ok(PromptTemplate {
            id: self.id.clone(),
            body,
            framing: self.framing,
            stop,
            mode: self.mode,
            language: self.language.clone(),
            completion_prefix: self.completion_prefix.clone(),
        })
    }
}

impl Default for TemplateRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        let mut registry = Self {
            templates: BTreeMap::new(),
            temperature: DEFAULT_TEMPERATURE,
        };
        for template in builtin_templates() {
            template.validate().expect("built-in templates are valid");
            registry
                .templates
                .insert(template.id.clone(), (template, true));
        }
        registry
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn register(&mut self, template: PromptTemplate) -> Result<(), TemplateError> {
        template.validate()?;
        if self.templates.contains_key(&template.id) {
            return Err(TemplateError::Duplicate(template.id));
        }
        self.templates
            .insert(template.id.clone(), (template, false));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(id)
            .map(|(t, _)| t)
            .ok_or_else(|| TemplateError::Unknown(id.to_string()))
    }

    pub fn list(&self) -> Vec<TemplateInfo> {
        self.templates
            .values()
            .map(|(t, builtin)| TemplateInfo {
                id: t.id.clone(),
                language: t.language.clone(),
                mode: t.mode,
                builtin: *builtin,
            })
            .collect()
    }

    pub fn list_language(&self, lang: &str) -> Vec<TemplateInfo> {
        self.list().into_iter().filter(|t| t.language == lang).collect()
    }

    pub fn render(&self, passage: &Passage, template_id: &str) -> Result<RenderedPrompt, TemplateError> {
        let template = self.get(template_id)?;
        if template.mode == ExtractionMode::Choice {
            return Err(TemplateError::Invalid {
                id: template_id.to_string(),
                reason: "scoring template cannot render passages".into(),
            });
        }
        if passage.text.is_empty() {
            return Err(TemplateError::EmptyPassage {
                id: template_id.to_string(),
            });
        }
        let tag_collision =
            template.mode == ExtractionMode::Tagged && passage.text.contains(CLOSE_TAG);
        if tag_collision {
            log::debug!(
                "passage {}#{} contains {CLOSE_TAG} under tagged template {template_id}",
                passage.doc_id,
                passage.index
            );
        }
        Ok(RenderedPrompt {
            doc_id: passage.doc_id.clone(),
            index: passage.index,
            template_id: template_id.to_string(),
            prompt: template.fill(&passage.text),
            stop: template.stop.clone(),
            temperature: self.temperature,
            tag_collision,
        })
    }

    /// Renders a document into a choice template with the given options,
    /// one `- option` line each.
    pub fn render_choice(
        &self,
        template_id: &str,
        document: &str,
        options: &[&str],
    ) -> Result<String, TemplateError> {
        let template = self.get(template_id)?;
        if template.mode != ExtractionMode::Choice {
            return Err(TemplateError::Invalid {
                id: template_id.to_string(),
                reason: "not a choice template".into(),
            });
        }
        let listed = options
            .iter()
            .map(|o| format!("- {o}"))
            .collect::<Vec<_>>()
            .join("\n");
        let (head, tail) = template.split_body();
        Ok(format!(
            "{}{}{}",
            head.replace(OPTIONS_PLACEHOLDER, &listed),
            document,
            tail.replace(OPTIONS_PLACEHOLDER, &listed)
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn passage(text: &str) -> Passage {
        Passage {
            doc_id: "doc".into(),
            index: 0,
            lang: "en".into(),
            text: text.into(),
            est_tokens: 0.0,
            split_flags: BTreeSet::new(),
        }
    }

    #[test]
    fn ten_builtins() {
        let reg = TemplateRegistry::builtin();
        assert_eq!(reg.list().len(), 10);
        assert!(reg.list().iter().all(|t| t.builtin));
    }

    #[test]
    fn german_filter() {
        let reg = TemplateRegistry::builtin();
        let de: Vec<_> = reg.list_language("de").into_iter().map(|t| t.id).collect();
        assert_eq!(de, [QA_OPT_DE]);
    }

    #[test]
    fn qa_render() {
        let reg = TemplateRegistry::builtin();
        let r = reg.render(&passage("The sky is blue."), QA).unwrap();
        assert!(r.prompt.starts_with("<s>[INST]A chat between a curious user"));
        assert!(r.prompt.contains(
            "Convert the following paragraph into a conversational format with multiple tags of \"Question:\" followed by \"Answer\":\nThe sky is blue.[/INST]"
        ));
        assert_eq!(r.stop, [MISTRAL_EOS]);
        assert_eq!(r.temperature, 0.7);
    }

    #[test]
    fn optimized_english_render() {
        let reg = TemplateRegistry::builtin();
        let r = reg.render(&passage("P"), QA_OPT_EN).unwrap();
        assert!(r.prompt.contains("* Rephrase the text into a dialogue format"));
        assert!(r.prompt.contains("<text>\nP\n</text>"));
        assert!(r.prompt.ends_with("Rephrased text:\n<text>"));
        assert_eq!(r.stop, [CLOSE_TAG, MISTRAL_EOS]);
        assert!(ends_inside_open_tag(&r.prompt));
    }

    #[test]
    fn qwen_render() {
        let reg = TemplateRegistry::builtin();
        let r = reg.render(&passage("P"), QA_OPT_QWEN2).unwrap();
        assert!(r.prompt.starts_with("<|im_start|>system\nYou are a helpful assistant.<|im_end|>"));
        assert!(r.prompt.ends_with("<|im_start|>assistant\nRephrased text:\n<text>\nQuestion:\n"));
        assert!(ends_inside_open_tag(&r.prompt));
    }

    #[test]
    fn tag_collision_is_flagged_not_dropped() {
        let reg = TemplateRegistry::builtin();
        let r = reg.render(&passage("a </text> b"), QA_OPT_DE).unwrap();
        assert!(r.tag_collision);
        assert!(r.prompt.contains("a </text> b"));
        let r = reg.render(&passage("a </text> b"), QA).unwrap();
        assert!(!r.tag_collision);
    }

    #[test]
    fn placeholder_in_passage_is_not_expanded() {
        let reg = TemplateRegistry::builtin();
        let r = reg.render(&passage("{text} {document}"), WIKI).unwrap();
        assert!(r.prompt.contains(":\n{text} {document}[/INST]"));
    }

    #[test]
    fn render_errors() {
        let reg = TemplateRegistry::builtin();
        assert!(matches!(reg.render(&passage("x"), "nope"), Err(TemplateError::Unknown(_))));
        assert!(matches!(reg.render(&passage(""), QA), Err(TemplateError::EmptyPassage { .. })));
        assert!(reg.render(&passage("x"), ASK_LLM).is_err());
    }

    #[test]
    fn ask_llm_render() {
        let reg = TemplateRegistry::builtin();
        let p = reg.render_choice(ASK_LLM, "Doc {options}", &["yes", "no"]).unwrap();
        assert!(p.starts_with("###DOCUMENT_START###\nDoc {options}\n###DOCUMENT_END###\n"));
        assert!(p.contains("Only generate one of the following options:\n- yes\n- no\n\nChoice:"));
        assert!(p.ends_with("Choice:"));
    }

    #[test]
    fn custom_template_registration() {
        let mut reg = TemplateRegistry::builtin();
        reg.register(PromptTemplate {
            id: "short".into(),
            body: "Summarize:\n{text}\nSummary:".into(),
            framing: ChatFraming::Raw,
            stop: vec!["\n\n".into()],
            mode: ExtractionMode::Legacy,
            language: "en".into(),
            completion_prefix: None,
        })
        .unwrap();
        assert_eq!(reg.list().len(), 11);
        assert!(!reg.list().iter().find(|t| t.id == "short").unwrap().builtin);
    }

    #[test]
    fn custom_template_validation() {
        let mut reg = TemplateRegistry::builtin();
        let base = PromptTemplate {
            id: "bad".into(),
            body: "no placeholder".into(),
            framing: ChatFraming::Raw,
            stop: vec![],
            mode: ExtractionMode::Legacy,
            language: "en".into(),
            completion_prefix: None,
        };
        assert!(matches!(reg.register(base.clone()), Err(TemplateError::Placeholder { count: 0, .. })));
        let twice = PromptTemplate {
            body: "{text}{text}".into(),
            ..base.clone()
        };
        assert!(matches!(reg.register(twice), Err(TemplateError::Placeholder { count: 2, .. })));
        let unframed = PromptTemplate {
            body: "{text}".into(),
            framing: ChatFraming::MistralInst,
            ..base.clone()
        };
        assert!(matches!(reg.register(unframed), Err(TemplateError::Invalid { .. })));
        let closed = PromptTemplate {
            body: "<text>{text}</text>".into(),
            mode: ExtractionMode::Tagged,
            ..base.clone()
        };
        assert!(matches!(reg.register(closed), Err(TemplateError::Invalid { .. })));
        let dup = PromptTemplate {
            id: QA.into(),
            body: "<s>[INST]{text}".into(),
            framing: ChatFraming::MistralInst,
            ..base
        };
        assert!(matches!(reg.register(dup), Err(TemplateError::Duplicate(_))));
    }

    #[test]
    fn custom_template_from_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.txt"), "<s>[INST]{text}[/INST]\n<text>").unwrap();
        let spec = CustomTemplateSpec {
            id: "mine".into(),
            file: "t.txt".into(),
            framing: ChatFraming::MistralInst,
            mode: ExtractionMode::Tagged,
            language: "en".into(),
            stop: None,
            completion_prefix: None,
        };
        let t = spec.load(dir.path()).unwrap();
        assert_eq!(t.stop, [CLOSE_TAG, MISTRAL_EOS]);
        let mut reg = TemplateRegistry::builtin();
        reg.register(t).unwrap();
        assert_eq!(reg.render(&passage("Z"), "mine").unwrap().prompt, "<s>[INST]Z[/INST]\n<text>");
    }

    proptest::proptest! {
        #[test]
        fn render_is_injective(a in "\\PC{1,60}", b in "\\PC{1,60}") {
            let reg = TemplateRegistry::builtin();
            for info in reg.list().into_iter().filter(|t| t.mode != ExtractionMode::Choice) {
                let ra = reg.render(&passage(&a), &info.id).unwrap();
                let rb = reg.render(&passage(&b), &info.id).unwrap();
                proptest::prop_assert_eq!(ra.prompt == rb.prompt, a == b);
            }
        }
    }
}
