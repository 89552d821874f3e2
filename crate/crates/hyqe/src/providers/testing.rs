//! Deterministic provider doubles.
//!
//! These are not `#[cfg(test)]`: the CLI's mock mode and the end-to-end
//! fixtures run on them, so ranking behavior can be pinned byte-for-byte
//! without a live endpoint.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::providers::{
    check_embed_input, check_window, Embedder, GenerationParams, Generator, PromptWrapper,
    DEFAULT_CHARS_PER_TOKEN,
};

/// Pure-function embedder: the text is hashed into a seed and expanded to a
/// fixed-dimension vector with values in [-1, 1). Byte-identical across runs
/// and processes, and deliberately left unnormalized so both similarity
/// modes get exercised.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    name: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder {
            dim: dim.max(1),
            name: format!("hash-embedder-d{}", dim.max(1)),
        }
    }

    fn embed_one(&self, text: &str) -> Embedding {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let values = (0..self.dim)
            // next_u64 mapped to [-1, 1); independent of any float-sampling
            // library so the bytes never shift under dependency upgrades
            .map(|_| (rng.next_u64() as f64 / u64::MAX as f64) * 2.0 - 1.0)
            .collect();
        Embedding::new(values).expect("hash embedding is finite and non-empty")
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        check_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Embedder backed by an explicit text-to-vector table, with optional
/// hash fallback for texts outside the table. Lets fixtures pin exact
/// vectors for hand-computed scores.
#[derive(Debug, Clone)]
pub struct FixtureEmbedder {
    table: BTreeMap<String, Vec<f64>>,
    fallback: Option<HashEmbedder>,
    dim: usize,
    name: String,
}

impl FixtureEmbedder {
    /// All table vectors must share one dimension. With `hash_fallback`,
    /// unknown texts get hash embeddings of the same dimension; without it
    /// they are an error.
    pub fn new(table: BTreeMap<String, Vec<f64>>, hash_fallback: bool) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::InvalidInput("fixture embedder table is empty".into()))?;
        if let Some((text, v)) = table.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::InvalidInput(format!(
                "fixture vector for {text:?} has dim {} but expected {dim}",
                v.len()
            )));
        }
        let mut hasher = Sha256::new();
        for (text, values) in &table {
            hasher.update(text.as_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let name = format!("fixture-embedder-{:02x}{:02x}{:02x}{:02x}-d{dim}", digest[0], digest[1], digest[2], digest[3]);
        Ok(FixtureEmbedder {
            table,
            fallback: hash_fallback.then(|| HashEmbedder::new(dim)),
            dim,
            name,
        })
    }
}

impl Embedder for FixtureEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        check_embed_input(texts)?;
        texts
            .iter()
            .map(|t| match self.table.get(t) {
                Some(v) => Embedding::new(v.clone()),
                None => match &self.fallback {
                    Some(h) => Ok(h.embed_one(t)),
                    None => Err(Error::InvalidInput(format!(
                        "no fixture embedding for text {t:?} (dim {})",
                        self.dim
                    ))),
                },
            })
            .collect()
    }

    fn name(&self) -> &str {
        &self.name
    }
}

/// Extracts the passage body from a rendered prompt, so generator doubles
/// can key their behavior on the context rather than the full template.
pub fn passage_of(prompt: &str) -> Option<&str> {
    let start = prompt.find("<passage>\n")? + "<passage>\n".len();
    let end = prompt[start..].find("\n</passage>")? + start;
    Some(&prompt[start..end])
}

/// Scripted generator: responds from a passage-text-to-response table.
/// Multiple responses per key are served round-robin, which is how
/// fixtures model repeated sampling. Unscripted passages fall back to
/// [`DerivedGenerator`] behavior.
pub struct ScriptedGenerator {
    scripts: BTreeMap<String, Vec<String>>,
    cursors: Mutex<BTreeMap<String, usize>>,
    derived: DerivedGenerator,
}

impl ScriptedGenerator {
    pub fn new(scripts: BTreeMap<String, Vec<String>>, window_tokens: usize) -> Self {
        ScriptedGenerator {
            scripts,
            cursors: Mutex::new(BTreeMap::new()),
            derived: DerivedGenerator::new(window_tokens),
        }
    }

    #[must_use]
    pub fn with_chars_per_token(mut self, ratio: usize) -> Self {
        self.derived = self.derived.with_chars_per_token(ratio);
        self
    }
}

impl Generator for ScriptedGenerator {
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String> {
        check_window(prompt, params, self.context_window_tokens(), self.chars_per_token())?;
        let key = passage_of(prompt).unwrap_or(prompt);
        if let Some(responses) = self.scripts.get(key) {
            let mut cursors = self.cursors.lock().expect("cursor lock");
            let cursor = cursors.entry(key.to_string()).or_insert(0);
            let response = responses[*cursor % responses.len()].clone();
            *cursor += 1;
            return Ok(response);
        }
        self.derived.generate(prompt, params, wrapper)
    }

    fn context_window_tokens(&self) -> usize {
        self.derived.context_window_tokens()
    }

    fn chars_per_token(&self) -> usize {
        self.derived.chars_per_token()
    }

    fn model_name(&self) -> &str {
        "mock-scripted"
    }
}

/// Deterministic stand-in for a real model: derives short questions from
/// the passage's distinct words. A blank passage yields `No Content`,
/// mirroring how the real prompt instructs models to answer.
pub struct DerivedGenerator {
    window_tokens: usize,
    chars_per_token: usize,
}

impl DerivedGenerator {
    pub fn new(window_tokens: usize) -> Self {
        DerivedGenerator {
            window_tokens,
            chars_per_token: DEFAULT_CHARS_PER_TOKEN,
        }
    }

    #[must_use]
    pub fn with_chars_per_token(mut self, ratio: usize) -> Self {
        self.chars_per_token = ratio.max(1);
        self
    }
}

impl Generator for DerivedGenerator {
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String> {
        let _ = wrapper;
        check_window(prompt, params, self.window_tokens, self.chars_per_token)?;
        let passage = passage_of(prompt).unwrap_or(prompt);
        if passage.trim().is_empty() {
            return Ok("No Content".to_string());
        }
        let mut seen = Vec::new();
        for word in passage.split_whitespace() {
            let token: String = word
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            if token.len() >= 3 && !seen.contains(&token) {
                seen.push(token);
                if seen.len() == 4 {
                    break;
                }
            }
        }
        if seen.is_empty() {
            return Ok("No Content".to_string());
        }
        let lines: Vec<String> = seen
            .iter()
            .enumerate()
            .map(|(i, token)| format!("{}. What is {token}?", i + 1))
            .collect();
        Ok(lines.join("\n"))
    }

    fn context_window_tokens(&self) -> usize {
        self.window_tokens
    }

    fn chars_per_token(&self) -> usize {
        self.chars_per_token
    }

    fn model_name(&self) -> &str {
        "mock-derived"
    }
}

/// Generator that always fails; exercises fallback and strict modes.
pub struct FailingGenerator {
    pub retryable: bool,
}

impl Generator for FailingGenerator {
    fn generate(&self, _: &str, _: &GenerationParams, _: &PromptWrapper) -> Result<String> {
        Err(Error::provider("scripted failure", self.retryable))
    }

    fn context_window_tokens(&self) -> usize {
        3900
    }

    fn model_name(&self) -> &str {
        "mock-failing"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{similarity, SimilarityMode};

    #[test]
    fn hash_embedder_is_a_pure_function() {
        let embedder = HashEmbedder::new(8);
        let a = embedder.embed(&["a".into()]).unwrap();
        let b = embedder.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(a[0].dim(), 8);
        assert_eq!(a[0], b[0]);
        assert_eq!(b[0], b[1]);
    }

    #[test]
    fn hash_embedder_distinct_inputs_diverge() {
        let embedder = HashEmbedder::new(8);
        let out = embedder.embed(&["a".into(), "b".into()]).unwrap();
        let cos = similarity(&out[0], &out[1], SimilarityMode::Cosine).unwrap();
        assert!(cos < 1.0 - 1e-6, "distinct texts must not be collinear: {cos}");
    }

    #[test]
    fn hash_embedder_preserves_cardinality_and_order() {
        let embedder = HashEmbedder::new(4);
        let texts: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let out = embedder.embed(&texts).unwrap();
        assert_eq!(out.len(), texts.len());
        let again = embedder.embed(&texts).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn embed_rejects_empty_text() {
        let embedder = HashEmbedder::new(4);
        let err = embedder.embed(&["ok".into(), "".into()]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn fixture_embedder_pins_exact_vectors() {
        let mut table = BTreeMap::new();
        table.insert("q".to_string(), vec![1.0, 0.0]);
        let embedder = FixtureEmbedder::new(table, true).unwrap();
        let out = embedder.embed(&["q".into(), "unknown".into()]).unwrap();
        assert_eq!(out[0].values(), &[1.0, 0.0]);
        assert_eq!(out[1].dim(), 2);
    }

    #[test]
    fn fixture_embedder_rejects_mixed_dims() {
        let mut table = BTreeMap::new();
        table.insert("a".to_string(), vec![1.0, 0.0]);
        table.insert("b".to_string(), vec![1.0]);
        assert!(FixtureEmbedder::new(table, false).is_err());
    }

    #[test]
    fn scripted_generator_echoes_fixture() {
        let mut scripts = BTreeMap::new();
        scripts.insert(
            "Q-about-apples".to_string(),
            vec!["What color are apples?\nHow do apples grow?".to_string()],
        );
        let generator = ScriptedGenerator::new(scripts, 100);
        let prompt = "intro\n```<passage>\nQ-about-apples\n</passage>'''\nrest";
        let out = generator
            .generate(prompt, &GenerationParams { max_output_tokens: 10, ..Default::default() }, &PromptWrapper::openai())
            .unwrap();
        assert_eq!(out, "What color are apples?\nHow do apples grow?");
    }

    #[test]
    fn scripted_generator_cycles_multiple_responses() {
        let mut scripts = BTreeMap::new();
        scripts.insert("p".to_string(), vec!["first".to_string(), "second".to_string()]);
        let generator = ScriptedGenerator::new(scripts, 100);
        let params = GenerationParams { max_output_tokens: 10, ..Default::default() };
        let prompt = "```<passage>\np\n</passage>'''";
        let wrapper = PromptWrapper::openai();
        assert_eq!(generator.generate(prompt, &params, &wrapper).unwrap(), "first");
        assert_eq!(generator.generate(prompt, &params, &wrapper).unwrap(), "second");
        assert_eq!(generator.generate(prompt, &params, &wrapper).unwrap(), "first");
    }

    #[test]
    fn window_overflow_is_rejected() {
        let generator = DerivedGenerator::new(20);
        let long_prompt = "word ".repeat(200);
        let err = generator
            .generate(&long_prompt, &GenerationParams::default(), &PromptWrapper::openai())
            .unwrap_err();
        assert!(matches!(err, Error::WindowExceeded { .. }));
    }

    #[test]
    fn derived_generator_blank_passage_is_no_content() {
        let generator = DerivedGenerator::new(3900);
        let params = GenerationParams { max_output_tokens: 10, ..Default::default() };
        let prompt = "```<passage>\n\n</passage>'''";
        let out = generator.generate(prompt, &params, &PromptWrapper::openai()).unwrap();
        assert_eq!(out, "No Content");
    }

    #[test]
    fn mock_window_is_config_echo() {
        assert_eq!(DerivedGenerator::new(100).context_window_tokens(), 100);
        assert_eq!(DerivedGenerator::new(8000).context_window_tokens(), 8000);
    }
}
