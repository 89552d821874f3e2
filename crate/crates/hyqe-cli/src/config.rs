//! Config file handling and provider construction.
//!
//! Precedence is command-line flags over config file over built-in
//! defaults. The defaults are the recommended operating point: rescore the
//! top 30 of 100 retrieved candidates, temperature 0.1, single completion,
//! lambda per embedding model where known.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Deserialize;

use hyqe::embedding::SimilarityMode;
use hyqe::hypquery::PromptTemplate;
use hyqe::pipeline::{HydeMode, PipelineConfig};
use hyqe::providers::openai::{OpenAiEmbedder, OpenAiGenerator, WireConfig};
use hyqe::providers::testing::{DerivedGenerator, FixtureEmbedder, HashEmbedder, ScriptedGenerator};
use hyqe::providers::{
    Embedder, GenerationParams, Generator, InstrumentedEmbedder, InstrumentedGenerator,
    PromptWrapper, ProviderCounters, SamplingLimit,
};
use hyqe::scoring::{Aggregation, DownsampleConfig, ScoreConfig};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub provider: ProviderSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub score: ScoreSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    #[serde(default = "default_kind")]
    pub kind: String,
    pub base_url: Option<String>,
    pub api_key_env: Option<String>,
    pub generator_model: Option<String>,
    pub embedder_model: Option<String>,
    pub window_tokens: Option<usize>,
    /// Chars-per-token ratio for window estimates (default 4).
    pub chars_per_token: Option<usize>,
    pub batch_size: Option<usize>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
    pub timeout_secs: Option<u64>,
    /// Mock-mode embedding dimension.
    pub mock_dim: Option<usize>,
    /// Optional JSON map: passage text -> scripted completion(s).
    pub mock_responses: Option<PathBuf>,
    /// Optional JSON map: text -> embedding vector.
    pub mock_embeddings: Option<PathBuf>,
    /// Whether texts outside `mock_embeddings` fall back to hash vectors.
    pub mock_hash_fallback: Option<bool>,
}

fn default_kind() -> String {
    "openai".to_string()
}

impl Default for ProviderSection {
    fn default() -> Self {
        ProviderSection {
            kind: default_kind(),
            base_url: None,
            api_key_env: None,
            generator_model: None,
            embedder_model: None,
            window_tokens: None,
            chars_per_token: None,
            batch_size: None,
            retries: None,
            backoff_ms: None,
            timeout_secs: None,
            mock_dim: None,
            mock_responses: None,
            mock_embeddings: None,
            mock_hash_fallback: None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    pub temperature: Option<f64>,
    pub n_samples: Option<u32>,
    pub max_output_tokens: Option<usize>,
    pub wrapper: Option<String>,
    pub top_k: Option<u32>,
    pub top_p: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub k: Option<usize>,
    pub retrieval_depth: Option<usize>,
    pub template: Option<String>,
    pub hyde: Option<String>,
    pub hyde_n_contexts: Option<usize>,
    pub strict: Option<bool>,
    pub concurrency: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub lambda: Option<f64>,
    pub aggregation: Option<String>,
    pub qc_mode: Option<String>,
    pub qh_mode: Option<String>,
    #[serde(default)]
    pub downsample: Option<DownsampleSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleSection {
    pub ratio: f64,
    pub seed: u64,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut config: FileConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?;
                // mock data paths are relative to the config file
                if let Some(dir) = path.parent() {
                    for p in [
                        &mut config.provider.mock_responses,
                        &mut config.provider.mock_embeddings,
                    ]
                    .into_iter()
                    .flatten()
                    {
                        if p.is_relative() {
                            *p = dir.join(&p);
                        }
                    }
                }
                Ok(config)
            }
        }
    }
}

/// Flag-level overrides shared by the ranking commands.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct PipelineFlags {
    /// Config file (TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Weight of the hypothetical-query term
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Rescore the first K candidates
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidates ingested per query from the baseline run
    #[arg(long)]
    pub retrieval_depth: Option<usize>,
    /// max | mean
    #[arg(long)]
    pub aggregation: Option<String>,
    /// cosine | inner_product for the query-context term
    #[arg(long)]
    pub qc_mode: Option<String>,
    /// cosine | inner_product for the query-hypothetical term
    #[arg(long)]
    pub qh_mode: Option<String>,
    /// Prompt template id (built in: default, argument)
    #[arg(long)]
    pub template: Option<String>,
    /// Directory of <template-id>.txt files overriding the built-ins
    #[arg(long)]
    pub templates_dir: Option<PathBuf>,
    /// off | plus | times
    #[arg(long)]
    pub hyde: Option<String>,
    #[arg(long)]
    pub hyde_n_contexts: Option<usize>,
    /// Abort on provider failure instead of falling back per candidate
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Downsample ratio in (0, 1]
    #[arg(long)]
    pub downsample_ratio: Option<f64>,
    /// Downsample seed (required when a ratio is set)
    #[arg(long)]
    pub downsample_seed: Option<u64>,
}

fn parse_mode(name: &str) -> anyhow::Result<SimilarityMode> {
    match name {
        "cosine" => Ok(SimilarityMode::Cosine),
        "inner_product" => Ok(SimilarityMode::InnerProduct),
        other => bail!("unknown similarity mode {other:?} (expected cosine or inner_product)"),
    }
}

fn parse_aggregation(name: &str) -> anyhow::Result<Aggregation> {
    match name {
        "max" => Ok(Aggregation::Max),
        "mean" => Ok(Aggregation::Mean),
        other => bail!("unknown aggregation {other:?} (expected max or mean)"),
    }
}

fn parse_hyde(name: &str) -> anyhow::Result<HydeMode> {
    match name {
        "off" => Ok(HydeMode::Off),
        "plus" => Ok(HydeMode::Plus),
        "times" => Ok(HydeMode::Times),
        other => bail!("unknown hyde mode {other:?} (expected off, plus, or times)"),
    }
}

/// Fully resolved runtime bundle for one command invocation.
pub struct Runtime {
    pub generator: Arc<dyn Generator>,
    pub embedder: Arc<dyn Embedder>,
    pub counters: Arc<ProviderCounters>,
    pub params: GenerationParams,
    pub wrapper: PromptWrapper,
    pub template: PromptTemplate,
    pub pipeline: PipelineConfig,
    /// Summary of the resolved configuration for manifests.
    pub snapshot: serde_json::Value,
}

pub fn build_runtime(file: &FileConfig, flags: &PipelineFlags) -> anyhow::Result<Runtime> {
    let counters = Arc::new(ProviderCounters::default());

    let window_tokens = file.provider.window_tokens.unwrap_or(3900);
    let chars_per_token = file.provider.chars_per_token.unwrap_or(
        hyqe::providers::DEFAULT_CHARS_PER_TOKEN,
    );
    if chars_per_token == 0 {
        bail!("provider.chars_per_token must be >= 1");
    }
    let (generator, embedder): (Arc<dyn Generator>, Arc<dyn Embedder>) =
        match file.provider.kind.as_str() {
            "mock" => build_mock_providers(&file.provider, window_tokens, chars_per_token)?,
            "openai" => build_openai_providers(&file.provider, window_tokens, chars_per_token)?,
            other => bail!("unknown provider kind {other:?} (expected mock or openai)"),
        };
    let generator: Arc<dyn Generator> =
        Arc::new(InstrumentedGenerator::new(generator, counters.clone()));
    let embedder: Arc<dyn Embedder> =
        Arc::new(InstrumentedEmbedder::new(embedder, counters.clone()));

    let mut params = GenerationParams::default();
    if let Some(t) = file.generation.temperature {
        params.temperature = t;
    }
    if let Some(n) = file.generation.n_samples {
        params.n_samples = n;
    }
    if let Some(m) = file.generation.max_output_tokens {
        params.max_output_tokens = m;
    }
    match (file.generation.top_k, file.generation.top_p) {
        (Some(_), Some(_)) => bail!("config sets both generation.top_k and generation.top_p"),
        (Some(k), None) => params.sampling = Some(SamplingLimit::TopK(k)),
        (None, Some(p)) => params.sampling = Some(SamplingLimit::TopP(p)),
        (None, None) => {}
    }
    if params.n_samples < 1 {
        bail!("generation.n_samples must be >= 1");
    }
    if params.max_output_tokens < 1 {
        bail!("generation.max_output_tokens must be >= 1");
    }
    if params.temperature.is_nan() || params.temperature < 0.0 {
        bail!("generation.temperature must be >= 0");
    }

    let wrapper_id = file.generation.wrapper.as_deref().unwrap_or("openai");
    let wrapper = PromptWrapper::by_id(wrapper_id)
        .ok_or_else(|| anyhow::anyhow!("unknown wrapper {wrapper_id:?}"))?;

    // score config: per-model defaults, then file, then flags
    let mut score = ScoreConfig::for_model(embedder.name());
    if let Some(lambda) = file.score.lambda {
        score.lambda = lambda;
    }
    if let Some(a) = &file.score.aggregation {
        score.aggregation = parse_aggregation(a)?;
    }
    if let Some(m) = &file.score.qc_mode {
        score.qc_mode = parse_mode(m)?;
    }
    if let Some(m) = &file.score.qh_mode {
        score.qh_mode = parse_mode(m)?;
    }
    if let Some(ds) = &file.score.downsample {
        score.downsample = Some(DownsampleConfig {
            ratio: ds.ratio,
            seed: ds.seed,
        });
    }
    if let Some(lambda) = flags.lambda {
        score.lambda = lambda;
    }
    if let Some(a) = &flags.aggregation {
        score.aggregation = parse_aggregation(a)?;
    }
    if let Some(m) = &flags.qc_mode {
        score.qc_mode = parse_mode(m)?;
    }
    if let Some(m) = &flags.qh_mode {
        score.qh_mode = parse_mode(m)?;
    }
    match (flags.downsample_ratio, flags.downsample_seed) {
        (Some(ratio), Some(seed)) => score.downsample = Some(DownsampleConfig { ratio, seed }),
        (Some(_), None) => bail!("--downsample-ratio requires --downsample-seed"),
        (None, Some(_)) => bail!("--downsample-seed requires --downsample-ratio"),
        (None, None) => {}
    }
    if let Some(ds) = &score.downsample {
        if !(ds.ratio > 0.0 && ds.ratio <= 1.0) {
            bail!("downsample ratio must be in (0, 1], got {}", ds.ratio);
        }
    }

    let template_id = flags
        .template
        .clone()
        .or_else(|| file.pipeline.template.clone())
        .unwrap_or_else(|| hyqe::hypquery::DEFAULT_TEMPLATE_ID.to_string());
    let template = resolve_template(&template_id, flags.templates_dir.as_deref())?;

    let hyde_name = flags
        .hyde
        .clone()
        .or_else(|| file.pipeline.hyde.clone())
        .unwrap_or_else(|| "off".to_string());

    let defaults = PipelineConfig::default();
    let pipeline = PipelineConfig {
        k: flags.k.or(file.pipeline.k).unwrap_or(defaults.k),
        retrieval_depth: flags
            .retrieval_depth
            .or(file.pipeline.retrieval_depth)
            .unwrap_or(defaults.retrieval_depth),
        score,
        template_id,
        hyde: parse_hyde(&hyde_name)?,
        hyde_n_contexts: flags
            .hyde_n_contexts
            .or(file.pipeline.hyde_n_contexts)
            .unwrap_or(defaults.hyde_n_contexts),
        strict: flags.strict || file.pipeline.strict.unwrap_or(false),
        concurrency: flags
            .concurrency
            .or(file.pipeline.concurrency)
            .unwrap_or(defaults.concurrency),
    };
    pipeline.validate()?;

    let snapshot = serde_json::json!({
        "provider_kind": file.provider.kind,
        "generator_model": generator.model_name(),
        "embedder_model": embedder.name(),
        "window_tokens": window_tokens,
        "chars_per_token": chars_per_token,
        "generation": params,
        "wrapper": wrapper.wrapper_id,
        "pipeline": pipeline,
    });

    Ok(Runtime {
        generator,
        embedder,
        counters,
        params,
        wrapper,
        template,
        pipeline,
        snapshot,
    })
}

fn resolve_template(template_id: &str, dir: Option<&Path>) -> anyhow::Result<PromptTemplate> {
    if let Some(dir) = dir {
        let path = dir.join(format!("{template_id}.txt"));
        if path.exists() {
            return Ok(PromptTemplate::from_file(template_id, &path)?);
        }
    }
    PromptTemplate::builtin(template_id)
        .ok_or_else(|| anyhow::anyhow!("unknown template {template_id:?} and no file provides it"))
}

fn build_mock_providers(
    section: &ProviderSection,
    window_tokens: usize,
    chars_per_token: usize,
) -> anyhow::Result<(Arc<dyn Generator>, Arc<dyn Embedder>)> {
    let dim = section.mock_dim.unwrap_or(8);

    let generator: Arc<dyn Generator> = match &section.mock_responses {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading mock responses {}", path.display()))?;
            let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(&text)
                .with_context(|| format!("parsing mock responses {}", path.display()))?;
            let mut scripts = BTreeMap::new();
            for (passage, value) in raw {
                let responses = match value {
                    serde_json::Value::String(s) => vec![s],
                    serde_json::Value::Array(items) => items
                        .into_iter()
                        .map(|v| {
                            v.as_str().map(str::to_string).ok_or_else(|| {
                                anyhow::anyhow!("mock response entries must be strings")
                            })
                        })
                        .collect::<anyhow::Result<Vec<_>>>()?,
                    _ => bail!("mock responses must map text to a string or array of strings"),
                };
                scripts.insert(passage, responses);
            }
            Arc::new(ScriptedGenerator::new(scripts, window_tokens).with_chars_per_token(chars_per_token))
        }
        None => Arc::new(DerivedGenerator::new(window_tokens).with_chars_per_token(chars_per_token)),
    };

    let embedder: Arc<dyn Embedder> = match &section.mock_embeddings {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading mock embeddings {}", path.display()))?;
            let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
                .with_context(|| format!("parsing mock embeddings {}", path.display()))?;
            let fallback = section.mock_hash_fallback.unwrap_or(false);
            Arc::new(FixtureEmbedder::new(table, fallback)?)
        }
        None => Arc::new(HashEmbedder::new(dim)),
    };

    Ok((generator, embedder))
}

fn build_openai_providers(
    section: &ProviderSection,
    window_tokens: usize,
    chars_per_token: usize,
) -> anyhow::Result<(Arc<dyn Generator>, Arc<dyn Embedder>)> {
    let defaults = WireConfig::default();
    let wire = WireConfig {
        base_url: section.base_url.clone().unwrap_or(defaults.base_url),
        api_key_env: section.api_key_env.clone().unwrap_or(defaults.api_key_env),
        retries: section.retries.unwrap_or(defaults.retries),
        backoff: section
            .backoff_ms
            .map(Duration::from_millis)
            .unwrap_or(defaults.backoff),
        timeout: section
            .timeout_secs
            .map(Duration::from_secs)
            .unwrap_or(defaults.timeout),
    };
    let generator_model = section
        .generator_model
        .clone()
        .unwrap_or_else(|| "gpt-3.5-turbo".to_string());
    let embedder_model = section
        .embedder_model
        .clone()
        .unwrap_or_else(|| "text-embedding-3-large".to_string());
    let batch_size = section.batch_size.unwrap_or(64);

    Ok((
        Arc::new(
            OpenAiGenerator::new(wire.clone(), generator_model, window_tokens)
                .with_chars_per_token(chars_per_token),
        ),
        Arc::new(OpenAiEmbedder::new(wire, embedder_model, batch_size)),
    ))
}
