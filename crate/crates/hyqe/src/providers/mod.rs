//! Text generator and embedder abstractions.
//!
//! The two traits here are the seams between the ranking engine and the
//! outside world. [`openai`] speaks the OpenAI-compatible chat-completions
//! and embeddings JSON protocol; [`testing`] provides deterministic doubles
//! so everything above this layer can run without a network.

pub mod openai;
pub mod testing;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};

/// Sampling limit sent alongside temperature. Exposed as a generic slot:
/// OpenAI endpoints accept `top_p` only, while many compatible servers
/// also accept `top_k`. Neither is sent unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingLimit {
    TopK(u32),
    TopP(f64),
}

/// Generation knobs for one hypothetical-query request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingLimit>,
    pub n_samples: u32,
    pub max_output_tokens: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: 0.1,
            sampling: None,
            n_samples: 1,
            max_output_tokens: 1024,
        }
    }
}

impl GenerationParams {
    /// Stable digest over every field; equal digests mean byte-identical
    /// generation settings.
    pub fn digest(&self) -> String {
        let sampling = match self.sampling {
            Some(SamplingLimit::TopK(k)) => format!("top_k={k}"),
            Some(SamplingLimit::TopP(p)) => format!("top_p={p}"),
            None => "none".to_string(),
        };
        let canon = format!(
            "temperature={};sampling={};n={};max_output={}",
            self.temperature, sampling, self.n_samples, self.max_output_tokens
        );
        hex_digest(canon.as_bytes())
    }
}

/// System rules plus a user-message template wrapped around each prompt.
///
/// Rendering yields the message sequence sent on the wire:
/// a system message (omitted when `system_text` is empty) followed by the
/// user message with `{prompt}` substituted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptWrapper {
    pub wrapper_id: String,
    pub system_text: String,
    pub user_wrap: String,
}

/// One chat message: role plus content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

const ASSISTANT_RULES: &str = "You are an AI assistant. Here are some rules you always follow:
- Generate human readable output, avoid creating output with gibberish text.
- Don't plainly replicate the given instruction.
- Generate only the requested output, don't include any other language before or after the requested output.
- Never say thank you, that you are happy to help, that you are an AI agent, etc. Just answer directly.
- Generate professional language typically used in business documents in North America.
- Never generate offensive or foul language.";

impl PromptWrapper {
    /// System rules as a dedicated system message, prompt passed through.
    pub fn openai() -> Self {
        PromptWrapper {
            wrapper_id: "openai".into(),
            system_text: ASSISTANT_RULES.into(),
            user_wrap: "{prompt}".into(),
        }
    }

    /// Instruction-format wrapper for Mistral-style chat templates: the
    /// rules and prompt travel inside one `[INST]` block, no system message.
    pub fn mistral_instruct() -> Self {
        PromptWrapper {
            wrapper_id: "mistral-instruct".into(),
            system_text: String::new(),
            user_wrap: format!(
                "<s>[INST]\n{ASSISTANT_RULES}\n\nThe user prompt is as follows:\n\n{{prompt}}[/INST]</s>"
            ),
        }
    }

    pub fn by_id(id: &str) -> Option<Self> {
        match id {
            "openai" => Some(Self::openai()),
            "mistral-instruct" => Some(Self::mistral_instruct()),
            _ => None,
        }
    }

    /// Builds the message sequence for one prompt. Never empty.
    pub fn render(&self, prompt: &str) -> Vec<ChatMessage> {
        let mut messages = Vec::with_capacity(2);
        if !self.system_text.is_empty() {
            messages.push(ChatMessage {
                role: "system".into(),
                content: self.system_text.clone(),
            });
        }
        messages.push(ChatMessage {
            role: "user".into(),
            content: self.user_wrap.replace("{prompt}", prompt),
        });
        messages
    }
}

/// Identifies one exact generation configuration for cache keying.
/// Equal fingerprints imply byte-identical generation behavior.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GeneratorFingerprint {
    pub model_name: String,
    pub prompt_template_id: String,
    pub params_digest: String,
    pub wrapper_id: String,
}

impl GeneratorFingerprint {
    pub fn new(
        model_name: &str,
        prompt_template_id: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Self {
        GeneratorFingerprint {
            model_name: model_name.to_string(),
            prompt_template_id: prompt_template_id.to_string(),
            params_digest: params.digest(),
            wrapper_id: wrapper.wrapper_id.clone(),
        }
    }
}

/// A text generator able to produce one completion per call.
pub trait Generator: Send + Sync {
    /// Returns the raw generated text of one completion.
    ///
    /// Callers must keep `estimate_tokens(prompt) + max_output_tokens`
    /// within [`Generator::context_window_tokens`]; implementations check
    /// and return [`Error::WindowExceeded`] otherwise.
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String>;

    /// Token budget of the underlying model.
    fn context_window_tokens(&self) -> usize;

    /// Chars-per-token ratio for window estimates; models tokenize
    /// differently, so the budgeting heuristic is tunable per provider.
    fn chars_per_token(&self) -> usize {
        DEFAULT_CHARS_PER_TOKEN
    }

    fn model_name(&self) -> &str;
}

/// A text embedder. Batches preserve cardinality and order.
pub trait Embedder: Send + Sync {
    /// One embedding per input, all with equal dimension, order preserved.
    /// Empty input texts are rejected.
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    /// Name recorded with cached embeddings; changing it invalidates reuse.
    fn name(&self) -> &str;
}

/// Whitespace-and-punctuation token estimate with a chars-per-token ratio.
///
/// Each punctuation character counts as one token; each alphanumeric run
/// counts as `ceil(len / chars_per_token)`. Deliberately conservative: the
/// estimate only gates chunking, it is not a real tokenizer.
pub fn estimate_tokens(text: &str, chars_per_token: usize) -> usize {
    let ratio = chars_per_token.max(1);
    let mut tokens = 0usize;
    let mut run = 0usize;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if run > 0 {
                tokens += run.div_ceil(ratio);
                run = 0;
            }
        } else if ch.is_alphanumeric() {
            run += 1;
        } else {
            if run > 0 {
                tokens += run.div_ceil(ratio);
                run = 0;
            }
            tokens += 1;
        }
    }
    if run > 0 {
        tokens += run.div_ceil(ratio);
    }
    tokens
}

/// Default chars-per-token ratio for window estimates.
pub const DEFAULT_CHARS_PER_TOKEN: usize = 4;

/// Call counters shared between a wrapped provider and run manifests.
#[derive(Debug, Default)]
pub struct ProviderCounters {
    pub generate_calls: AtomicU64,
    pub embed_calls: AtomicU64,
    pub embed_texts: AtomicU64,
}

impl ProviderCounters {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.generate_calls.load(Ordering::Relaxed),
            self.embed_calls.load(Ordering::Relaxed),
            self.embed_texts.load(Ordering::Relaxed),
        )
    }
}

/// Decorator counting every call that reaches the inner generator.
pub struct InstrumentedGenerator<G> {
    inner: G,
    counters: Arc<ProviderCounters>,
}

impl<G: Generator> InstrumentedGenerator<G> {
    pub fn new(inner: G, counters: Arc<ProviderCounters>) -> Self {
        InstrumentedGenerator { inner, counters }
    }
}

impl<G: Generator> Generator for InstrumentedGenerator<G> {
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String> {
        self.counters.generate_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.generate(prompt, params, wrapper)
    }

    fn context_window_tokens(&self) -> usize {
        self.inner.context_window_tokens()
    }

    fn chars_per_token(&self) -> usize {
        self.inner.chars_per_token()
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

/// Decorator counting embed calls and the texts they carry.
pub struct InstrumentedEmbedder<E> {
    inner: E,
    counters: Arc<ProviderCounters>,
}

impl<E: Embedder> InstrumentedEmbedder<E> {
    pub fn new(inner: E, counters: Arc<ProviderCounters>) -> Self {
        InstrumentedEmbedder { inner, counters }
    }
}

impl<E: Embedder> Embedder for InstrumentedEmbedder<E> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        self.counters.embed_calls.fetch_add(1, Ordering::Relaxed);
        self.counters
            .embed_texts
            .fetch_add(texts.len() as u64, Ordering::Relaxed);
        self.inner.embed(texts)
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

impl<T: Generator + ?Sized> Generator for Arc<T> {
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String> {
        (**self).generate(prompt, params, wrapper)
    }

    fn context_window_tokens(&self) -> usize {
        (**self).context_window_tokens()
    }

    fn chars_per_token(&self) -> usize {
        (**self).chars_per_token()
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        (**self).embed(texts)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(digest.len() * 2);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub(crate) fn check_window(
    prompt: &str,
    params: &GenerationParams,
    window: usize,
    chars_per_token: usize,
) -> Result<()> {
    let needed = estimate_tokens(prompt, chars_per_token) + params.max_output_tokens;
    if needed > window {
        return Err(Error::WindowExceeded { needed, window });
    }
    Ok(())
}

pub(crate) fn check_embed_input(texts: &[String]) -> Result<()> {
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::InvalidInput(format!(
            "embed input {i} is empty; embedders require non-empty text"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_changes_with_any_field() {
        let params = GenerationParams::default();
        let wrapper = PromptWrapper::openai();
        let base = GeneratorFingerprint::new("m", "default", &params, &wrapper);

        let other_model = GeneratorFingerprint::new("m2", "default", &params, &wrapper);
        assert_ne!(base, other_model);

        let other_template = GeneratorFingerprint::new("m", "argument", &params, &wrapper);
        assert_ne!(base, other_template);

        let mut hot = params.clone();
        hot.temperature = 0.5;
        let other_params = GeneratorFingerprint::new("m", "default", &hot, &wrapper);
        assert_ne!(base, other_params);

        let other_wrapper =
            GeneratorFingerprint::new("m", "default", &params, &PromptWrapper::mistral_instruct());
        assert_ne!(base, other_wrapper);

        let same = GeneratorFingerprint::new("m", "default", &params, &wrapper);
        assert_eq!(base, same);
    }

    #[test]
    fn params_digest_distinguishes_sampling() {
        let a = GenerationParams {
            sampling: Some(SamplingLimit::TopK(1)),
            ..GenerationParams::default()
        };
        let b = GenerationParams {
            sampling: Some(SamplingLimit::TopP(1.0)),
            ..GenerationParams::default()
        };
        assert_ne!(a.digest(), b.digest());
        assert_ne!(a.digest(), GenerationParams::default().digest());
    }

    #[test]
    fn openai_wrapper_renders_system_then_user() {
        let messages = PromptWrapper::openai().render("hello");
        assert_eq!(messages.len(), 2);
        assert_eq!(messages[0].role, "system");
        assert!(messages[0].content.starts_with("You are an AI assistant."));
        assert_eq!(messages[1].role, "user");
        assert_eq!(messages[1].content, "hello");
    }

    #[test]
    fn mistral_wrapper_is_single_user_message() {
        let messages = PromptWrapper::mistral_instruct().render("hello");
        assert_eq!(messages.len(), 1);
        assert_eq!(messages[0].role, "user");
        assert!(messages[0].content.starts_with("<s>[INST]\n"));
        assert!(messages[0].content.contains("\n\nhello[/INST]</s>"));
    }

    #[test]
    fn token_estimate_counts_runs_and_punctuation() {
        // two 5-char runs, ceil(5/4) = 2 each
        assert_eq!(estimate_tokens("hello world", 4), 4);
        assert_eq!(estimate_tokens("hi", 4), 1);
        assert_eq!(estimate_tokens("a.b", 4), 3);
        assert_eq!(estimate_tokens("", 4), 0);
        assert_eq!(estimate_tokens("    ", 4), 0);
    }
}
