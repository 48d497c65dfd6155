//! Seeded synthetic multilingual corpora for fixtures, benchmarks and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus_io::Document;
use crate::util::derive_seed;

const EN: &[&str] = &[
    "the", "river", "city", "history", "people", "ancient", "market", "during", "century", "built",
    "water", "north", "small", "scholars", "describe", "language", "mountain", "trade", "winter", "library",
];
const DE: &[&str] = &[
    "der", "Fluss", "Stadt", "Geschichte", "Menschen", "über", "Markt", "während", "Jahrhundert", "gebaut",
    "Wasser", "Norden", "klein", "Gelehrte", "beschreiben", "Sprache", "Berg", "Handel", "Straße", "Bücherei",
];
const ES: &[&str] = &[
    "el", "río", "ciudad", "historia", "gente", "antiguo", "mercado", "durante", "siglo", "construido",
    "agua", "norte", "pequeño", "estudiosos", "describen", "idioma", "montaña", "comercio", "invierno", "años",
];
const IT: &[&str] = &[
    "il", "fiume", "città", "storia", "persone", "antico", "mercato", "durante", "secolo", "costruito",
    "acqua", "nord", "piccolo", "studiosi", "descrivono", "lingua", "montagna", "commercio", "perché", "già",
];

fn vocabulary(lang: &str) -> &'static [&'static str] {
    match lang {
        "de" => DE,
        "es" => ES,
        "it" => IT,
        _ => EN,
    }
}

/// Shape of a generated corpus. Sizes are inclusive ranges.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub docs: usize,
    pub seed: u64,
    pub languages: Vec<String>,
    pub paragraphs: (usize, usize),
    pub sentences: (usize, usize),
    pub words: (usize, usize),
    /// Probability of a paragraph made of one punctuation-free run long
    /// enough to exceed any passage budget.
    pub unsplittable_rate: f64,
    /// Probability of a tiny one-sentence document.
    pub tiny_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            docs: 100,
            seed: 0,
            languages: ["en", "de", "es", "it"].iter().map(|s| s.to_string()).collect(),
            paragraphs: (1, 8),
            sentences: (1, 12),
            words: (3, 25),
            unsplittable_rate: 0.01,
            tiny_rate: 0.05,
        }
    }
}

fn sentence(rng: &mut ChaCha8Rng, vocab: &[&str], words: (usize, usize)) -> String {
    let n = rng.gen_range(words.0..=words.1);
    let mut s: Vec<String> = (0..n).map(|_| vocab.choose(rng).unwrap().to_string()).collect();
    if let Some(first) = s.first_mut() {
        let mut chars = first.chars();
        if let Some(c) = chars.next() {
            *first = c.to_uppercase().chain(chars).collect();
        }
    }
    let end = *[".", ".", ".", "!", "?"].choose(rng).unwrap();
    format!("{}{end}", s.join(" "))
}

/// One document; reproducible from `(spec.seed, index)` alone.
pub fn document(spec: &SyntheticSpec, index: usize) -> Document {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["synthetic", &index.to_string()]));
    let lang = spec.languages.choose(&mut rng).cloned().unwrap_or_else(|| "en".into());
    let vocab = vocabulary(&lang);
    let text = if rng.gen_bool(spec.tiny_rate) {
        sentence(&mut rng, vocab, (3, 8))
    } else {
        let paragraphs = rng.gen_range(spec.paragraphs.0..=spec.paragraphs.1);
        let mut out = Vec::with_capacity(paragraphs);
        for _ in 0..paragraphs {
            if rng.gen_bool(spec.unsplittable_rate) {
                let n = rng.gen_range(300..900);
                let run: Vec<&str> = (0..n).map(|_| *vocab.choose(&mut rng).unwrap()).collect();
                out.push(run.join(" "));
                continue;
            }
            let sentences = rng.gen_range(spec.sentences.0..=spec.sentences.1);
            let para: Vec<String> = (0..sentences).map(|_| sentence(&mut rng, vocab, spec.words)).collect();
            out.push(para.join(" "));
            // occasional blank and whitespace-only lines
            if rng.gen_bool(0.1) {
                out.push("   ".into());
            }
        }
        out.join("\n")
    };
    Document::new(format!("doc-{index:06}"), text, lang)
}

pub fn corpus(spec: &SyntheticSpec) -> Vec<Document> {
    (0..spec.docs).map(|i| document(spec, i)).collect()
}

/// Monolingual well-formed documents until `target_chars` characters are
/// reached; ids are `<prefix>-<n>`.
pub fn corpus_of_chars(prefix: &str, target_chars: usize, seed: u64) -> Vec<Document> {
    let spec = SyntheticSpec {
        seed,
        languages: vec!["en".into()],
        unsplittable_rate: 0.0,
        tiny_rate: 0.0,
        ..Default::default()
    };
    let mut docs = Vec::new();
    let mut total = 0;
    let mut i = 0;
    while total < target_chars {
        let mut d = document(&spec, i);
        d.id = format!("{prefix}-{i:06}");
        total += d.text.chars().count();
        docs.push(d);
        i += 1;
    }
    docs
}
