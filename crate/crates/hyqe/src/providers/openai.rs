//! OpenAI-compatible chat-completions and embeddings client.
//!
//! Works against api.openai.com and the many local servers speaking the
//! same JSON protocol. Credentials come from an environment variable so
//! secrets stay out of config files.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::providers::{
    check_embed_input, check_window, ChatMessage, Embedder, GenerationParams, Generator,
    PromptWrapper, SamplingLimit, DEFAULT_CHARS_PER_TOKEN,
};

/// Connection settings shared by the generator and embedder clients.
#[derive(Debug, Clone)]
pub struct WireConfig {
    /// Base URL up to but not including `/chat/completions`.
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    /// No Authorization header is sent when the variable is unset.
    pub api_key_env: String,
    /// Max retry attempts after the first failure.
    pub retries: u32,
    /// First backoff delay; doubles per attempt.
    pub backoff: Duration,
    /// Per-request timeout.
    pub timeout: Duration,
}

impl Default for WireConfig {
    fn default() -> Self {
        WireConfig {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            retries: 3,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(60),
        }
    }
}

impl WireConfig {
    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into()
    }

    fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty())
    }

    /// POSTs the body, retrying transient failures with exponential backoff.
    fn post_json(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}/{}", self.base_url.trim_end_matches('/'), path);
        let agent = self.agent();
        let mut attempt = 0u32;
        loop {
            let request = match self.api_key() {
                Some(key) => agent
                    .post(&url)
                    .header("Authorization", &format!("Bearer {key}")),
                None => agent.post(&url),
            };
            let outcome = request.send_json(body).and_then(|mut r| r.body_mut().read_json::<Value>());
            match outcome {
                Ok(value) => return Ok(value),
                Err(err) => {
                    let (retryable, message) = classify(&err);
                    if retryable && attempt < self.retries {
                        std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                        attempt += 1;
                        continue;
                    }
                    return Err(Error::provider(format!("POST {url}: {message}"), retryable));
                }
            }
        }
    }
}

/// 429 and 5xx are worth retrying, as are transport-level failures; other
/// status codes are permanent.
fn classify(err: &ureq::Error) -> (bool, String) {
    match err {
        ureq::Error::StatusCode(code) => {
            let retryable = *code == 429 || *code >= 500;
            (retryable, format!("http status {code}"))
        }
        ureq::Error::Io(e) => (true, format!("io: {e}")),
        ureq::Error::Timeout(t) => (true, format!("timeout: {t}")),
        ureq::Error::ConnectionFailed => (true, "connection failed".to_string()),
        other => (false, other.to_string()),
    }
}

/// Chat-completions generator.
pub struct OpenAiGenerator {
    wire: WireConfig,
    model: String,
    window_tokens: usize,
    chars_per_token: usize,
}

impl OpenAiGenerator {
    /// `window_tokens` defaults to 3900 when building from config elsewhere.
    pub fn new(wire: WireConfig, model: impl Into<String>, window_tokens: usize) -> Self {
        OpenAiGenerator {
            wire,
            model: model.into(),
            window_tokens,
            chars_per_token: DEFAULT_CHARS_PER_TOKEN,
        }
    }

    #[must_use]
    pub fn with_chars_per_token(mut self, ratio: usize) -> Self {
        self.chars_per_token = ratio.max(1);
        self
    }

    fn request_body(&self, messages: &[ChatMessage], params: &GenerationParams) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": params.temperature,
            "n": params.n_samples,
            "max_tokens": params.max_output_tokens,
        });
        match params.sampling {
            Some(SamplingLimit::TopK(k)) => {
                body["top_k"] = json!(k);
            }
            Some(SamplingLimit::TopP(p)) => {
                body["top_p"] = json!(p);
            }
            None => {}
        }
        body
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

impl Generator for OpenAiGenerator {
    fn generate(
        &self,
        prompt: &str,
        params: &GenerationParams,
        wrapper: &PromptWrapper,
    ) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must be non-empty".into()));
        }
        check_window(prompt, params, self.window_tokens, self.chars_per_token)?;
        let messages = wrapper.render(prompt);
        let body = self.request_body(&messages, params);
        let value = self.wire.post_json("chat/completions", &body)?;
        let parsed: ChatResponse = serde_json::from_value(value)
            .map_err(|e| Error::provider(format!("malformed chat response: {e}"), false))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| Error::provider("chat response had no choices", false))
    }

    fn context_window_tokens(&self) -> usize {
        self.window_tokens
    }

    fn chars_per_token(&self) -> usize {
        self.chars_per_token
    }

    fn model_name(&self) -> &str {
        &self.model
    }
}

/// Embeddings client. Splits input into batches of `batch_size` texts and
/// restores provider-reported ordering within each batch.
pub struct OpenAiEmbedder {
    wire: WireConfig,
    model: String,
    batch_size: usize,
}

impl OpenAiEmbedder {
    pub fn new(wire: WireConfig, model: impl Into<String>, batch_size: usize) -> Self {
        OpenAiEmbedder {
            wire,
            model: model.into(),
            batch_size: batch_size.max(1),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    index: usize,
    embedding: Vec<f64>,
}

impl Embedder for OpenAiEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        check_embed_input(texts)?;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            let body = json!({ "model": self.model, "input": batch });
            let value = self.wire.post_json("embeddings", &body)?;
            let parsed: EmbeddingsResponse = serde_json::from_value(value)
                .map_err(|e| Error::provider(format!("malformed embeddings response: {e}"), false))?;
            if parsed.data.len() != batch.len() {
                return Err(Error::provider(
                    format!(
                        "embeddings response has {} rows for {} inputs",
                        parsed.data.len(),
                        batch.len()
                    ),
                    false,
                ));
            }
            let mut rows = parsed.data;
            rows.sort_by_key(|r| r.index);
            for row in rows {
                out.push(Embedding::new(row.embedding)?);
            }
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        &self.model
    }
}
