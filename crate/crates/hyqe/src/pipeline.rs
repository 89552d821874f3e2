//! End-to-end re-ranking: take a query with its top-K candidates, fetch or
//! generate hypothetical queries per candidate through the cache, score,
//! and emit the reordered list.
//!
//! Only the first `k` candidates are rescored; the rest keep their baseline
//! order behind the reranked head. Tie handling and tail score shifting are
//! deterministic so runs are byte-reproducible given a fixed cache.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{CacheKey, GenerateDeps, QueryCache};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::hypquery::PromptTemplate;
use crate::providers::{Embedder, GenerationParams, Generator, GeneratorFingerprint, PromptWrapper};
use crate::scoring::{downsample, score, ScoreBreakdown, ScoreConfig};
use crate::types::{ContextDoc, Query, ScoredContext};

pub const HYDE_TEMPLATE_ID: &str = "hyde-default";
/// Query-to-passage prompt used for the averaged-query-embedding mode.
/// This text is this crate's own; the placeholder is `{query}`.
pub const HYDE_TEMPLATE_BODY: &str = include_str!("../templates/hyde-default.txt");

/// How a query-expansion pass composes with re-ranking. `Plus` reranks with
/// the plain query embedding (expansion only affected upstream retrieval);
/// `Times` replaces the query embedding with the mean of the query and the
/// generated hypothetical contexts in both score terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HydeMode {
    Off,
    Plus,
    Times,
}

/// Pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of head candidates to rescore.
    pub k: usize,
    /// How many baseline candidates to ingest per query.
    pub retrieval_depth: usize,
    pub score: ScoreConfig,
    pub template_id: String,
    pub hyde: HydeMode,
    pub hyde_n_contexts: usize,
    /// Abort on provider failure instead of falling back to the baseline
    /// similarity for the affected candidate.
    pub strict: bool,
    /// Bound on concurrent per-candidate acquisition.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 30,
            retrieval_depth: 100,
            score: ScoreConfig::default(),
            template_id: crate::hypquery::DEFAULT_TEMPLATE_ID.to_string(),
            hyde: HydeMode::Off,
            hyde_n_contexts: 4,
            strict: false,
            concurrency: 8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.k > self.retrieval_depth {
            return Err(Error::Config(format!(
                "k ({}) must not exceed retrieval depth ({})",
                self.k, self.retrieval_depth
            )));
        }
        if self.hyde_n_contexts == 0 {
            return Err(Error::Config("hyde_n_contexts must be >= 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

/// A query with its baseline-ordered candidates (scores non-increasing,
/// ids distinct).
#[derive(Debug, Clone)]
pub struct CandidateList {
    query: Query,
    candidates: Vec<(ContextDoc, f64)>,
}

impl CandidateList {
    pub fn new(query: Query, candidates: Vec<(ContextDoc, f64)>) -> Result<Self> {
        if query.text.trim().is_empty() {
            return Err(Error::InvalidInput(format!(
                "query {} has empty text",
                query.id
            )));
        }
        let mut prev = f64::INFINITY;
        for (i, (doc, baseline)) in candidates.iter().enumerate() {
            if *baseline > prev {
                return Err(Error::InvalidInput(format!(
                    "candidate {i} ({}) breaks non-increasing baseline order",
                    doc.id
                )));
            }
            prev = *baseline;
            if candidates[..i].iter().any(|(d, _)| d.id == doc.id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate candidate id {:?}",
                    doc.id
                )));
            }
        }
        Ok(CandidateList { query, candidates })
    }

    pub fn query(&self) -> &Query {
        &self.query
    }

    pub fn candidates(&self) -> &[(ContextDoc, f64)] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Providers and cache needed by one ranking pass. The template must be the
/// resolution of `PipelineConfig::template_id`.
pub struct PipelineDeps<'a> {
    pub generator: &'a dyn Generator,
    pub embedder: &'a dyn Embedder,
    pub cache: &'a QueryCache,
    pub template: &'a PromptTemplate,
    pub params: &'a GenerationParams,
    pub wrapper: &'a PromptWrapper,
}

impl<'a> PipelineDeps<'a> {
    fn generate_deps(&self) -> GenerateDeps<'a> {
        GenerateDeps {
            generator: self.generator,
            embedder: self.embedder,
            template: self.template,
            params: self.params,
            wrapper: self.wrapper,
        }
    }

    pub fn fingerprint(&self) -> GeneratorFingerprint {
        GeneratorFingerprint::new(
            self.generator.model_name(),
            &self.template.template_id,
            self.params,
            self.wrapper,
        )
    }
}

/// A head candidate prepared for scoring. `embedding` is `None` only for
/// the degenerate case of a candidate with no text at all, which scores 0.
#[derive(Debug, Clone)]
pub struct HeadCandidate {
    pub context_id: String,
    pub embedding: Option<Embedding>,
    pub hyp_embeddings: Vec<Embedding>,
}

/// Ranking result plus per-head-context score breakdowns and any provider
/// incidents that were absorbed by baseline fallback.
#[derive(Debug, Clone)]
pub struct RankOutput {
    pub ranking: Vec<ScoredContext>,
    pub breakdowns: std::collections::BTreeMap<String, ScoreBreakdown>,
    pub incidents: Vec<String>,
}

/// Deterministic ordering core: scores prepared head candidates, sorts them
/// (total desc, then earlier baseline position, then id), and appends the
/// tail in baseline order with ranks over the whole list.
///
/// Tail entries keep their baseline scores unless those would sit at or
/// above the reranked head minimum, in which case the whole tail shifts
/// down uniformly; order is what matters downstream, and the uniform shift
/// keeps emitted runs monotone in score.
pub fn rank_prepared(
    q_emb: &Embedding,
    head: &[HeadCandidate],
    tail: &[(String, f64)],
    cfg: &ScoreConfig,
) -> Result<(Vec<ScoredContext>, std::collections::BTreeMap<String, ScoreBreakdown>)> {
    let mut scored: Vec<(usize, &HeadCandidate, ScoreBreakdown)> = Vec::with_capacity(head.len());
    for (position, candidate) in head.iter().enumerate() {
        let breakdown = match &candidate.embedding {
            Some(c_emb) => score(q_emb, c_emb, &candidate.hyp_embeddings, cfg)?,
            None => ScoreBreakdown {
                total: 0.0,
                qc_term: 0.0,
                qh_term: 0.0,
                best_hyp_index: None,
            },
        };
        scored.push((position, candidate, breakdown));
    }

    scored.sort_by(|a, b| {
        b.2.total
            .total_cmp(&a.2.total)
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.context_id.cmp(&b.1.context_id))
    });

    let mut breakdowns = std::collections::BTreeMap::new();
    let mut ranking: Vec<ScoredContext> = Vec::with_capacity(head.len() + tail.len());
    for (rank0, (_, candidate, breakdown)) in scored.into_iter().enumerate() {
        ranking.push(ScoredContext {
            context_id: candidate.context_id.clone(),
            score: breakdown.total,
            rank: rank0 + 1,
        });
        breakdowns.insert(candidate.context_id.clone(), breakdown);
    }

    if !tail.is_empty() {
        let head_min = ranking
            .last()
            .map(|s| s.score)
            .unwrap_or(f64::INFINITY);
        let tail_max = tail[0].1;
        let shift = if tail_max >= head_min {
            tail_max - head_min + 1.0
        } else {
            0.0
        };
        for (offset, (context_id, baseline)) in tail.iter().enumerate() {
            ranking.push(ScoredContext {
                context_id: context_id.clone(),
                score: baseline - shift,
                rank: head.len() + offset + 1,
            });
        }
    }

    Ok((ranking, breakdowns))
}

/// Full ranking pass: embeds the query once, acquires hypothetical queries
/// for the head through the cache, scores, and orders.
pub fn rank(candidates: &CandidateList, cfg: &PipelineConfig, deps: &PipelineDeps) -> Result<RankOutput> {
    cfg.validate()?;
    let q_emb = embed_query(&candidates.query().text, deps)?;
    rank_with_embedding(candidates, cfg, deps, &q_emb)
}

fn embed_query(text: &str, deps: &PipelineDeps) -> Result<Embedding> {
    let mut out = deps.embedder.embed(&[text.to_string()])?;
    out.pop()
        .ok_or_else(|| Error::provider("embedder returned nothing for the query", false))
}

/// Ranking with a caller-supplied query embedding; the expansion modes use
/// this to substitute an averaged embedding in both score terms.
pub fn rank_with_embedding(
    candidates: &CandidateList,
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
    q_emb: &Embedding,
) -> Result<RankOutput> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidInput("candidate list is empty".into()));
    }

    let head_count = cfg.k.min(candidates.len());
    let head_docs = &candidates.candidates()[..head_count];
    let tail: Vec<(String, f64)> = candidates.candidates()[head_count..]
        .iter()
        .map(|(doc, baseline)| (doc.id.clone(), *baseline))
        .collect();

    // one batched call for all head texts; empty-text candidates are
    // skipped here and score zero later
    let mut text_slots: Vec<Option<usize>> = Vec::with_capacity(head_count);
    let mut texts: Vec<String> = Vec::new();
    for (doc, _) in head_docs {
        let rendered = doc.rendered_text();
        if rendered.is_empty() {
            text_slots.push(None);
        } else {
            text_slots.push(Some(texts.len()));
            texts.push(rendered);
        }
    }
    let context_embeddings = if texts.is_empty() {
        Vec::new()
    } else {
        deps.embedder.embed(&texts)?
    };

    let fingerprint = deps.fingerprint();
    let incidents: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let generate_deps = deps.generate_deps();

    let prepared: Vec<Result<HeadCandidate>> =
        parallel_map(head_docs, cfg.concurrency, |position, (doc, _)| {
            let embedding = text_slots[position].map(|slot| context_embeddings[slot].clone());
            if embedding.is_none() {
                return Ok(HeadCandidate {
                    context_id: doc.id.clone(),
                    embedding: None,
                    hyp_embeddings: Vec::new(),
                });
            }
            let key = CacheKey::new(doc.id.clone(), fingerprint.clone());
            let hyp_embeddings = match deps.cache.get_or_generate(&key, doc, &generate_deps) {
                Ok(record) => match cfg.score.downsample {
                    Some(ds) => {
                        let seed = per_context_seed(ds.seed, &doc.id);
                        let set = downsample(&record.to_query_set(), ds.ratio, seed);
                        set.embeddings.unwrap_or_default()
                    }
                    None => record.embeddings,
                },
                Err(err) if !cfg.strict => {
                    incidents
                        .lock()
                        .expect("incident lock")
                        .push(format!("context {}: {err}; fell back to baseline similarity", doc.id));
                    Vec::new()
                }
                Err(err) => return Err(err),
            };
            Ok(HeadCandidate {
                context_id: doc.id.clone(),
                embedding,
                hyp_embeddings,
            })
        });

    let mut head = Vec::with_capacity(head_count);
    for item in prepared {
        head.push(item?);
    }

    let (ranking, breakdowns) = rank_prepared(q_emb, &head, &tail, &cfg.score)?;
    let mut incidents = incidents.into_inner().expect("incident lock");
    incidents.sort();
    Ok(RankOutput {
        ranking,
        breakdowns,
        incidents,
    })
}

/// Builds the averaged query embedding: the query plus `n` generated
/// hypothetical contexts, averaged elementwise over the n+1 vectors.
pub fn hyde_query_embedding(
    query: &Query,
    deps: &PipelineDeps,
    n: usize,
) -> Result<Embedding> {
    if n == 0 {
        return Err(Error::InvalidInput("hyde_n_contexts must be >= 1".into()));
    }
    let prompt = HYDE_TEMPLATE_BODY.replace("{query}", &query.text);
    let mut texts = vec![query.text.clone()];
    for _ in 0..n {
        let context = deps.generator.generate(&prompt, deps.params, deps.wrapper)?;
        if context.trim().is_empty() {
            return Err(Error::provider("empty hypothetical context completion", false));
        }
        texts.push(context);
    }
    let embeddings = deps.embedder.embed(&texts)?;
    mean_embedding(&embeddings)
}

fn mean_embedding(embeddings: &[Embedding]) -> Result<Embedding> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero embeddings".into()))?;
    let dim = first.dim();
    let mut acc = vec![0.0f64; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(Error::Dimension {
                left: dim,
                right: e.dim(),
            });
        }
        for (slot, v) in acc.iter_mut().zip(e.values()) {
            *slot += v;
        }
    }
    let n = embeddings.len() as f64;
    Embedding::new(acc.into_iter().map(|v| v / n).collect())
}

/// Ranking composed with query expansion. `Plus` ranks with the plain query
/// embedding; `Times` ranks with the averaged embedding in both terms.
pub fn compose_hyde(
    candidates: &CandidateList,
    cfg: &PipelineConfig,
    deps: &PipelineDeps,
) -> Result<RankOutput> {
    cfg.validate()?;
    match cfg.hyde {
        HydeMode::Off => Err(Error::InvalidInput(
            "compose_hyde requires hyde mode plus or times".into(),
        )),
        HydeMode::Plus => rank(candidates, cfg, deps),
        HydeMode::Times => {
            let averaged = hyde_query_embedding(candidates.query(), deps, cfg.hyde_n_contexts)?;
            rank_with_embedding(candidates, cfg, deps, &averaged)
        }
    }
}

/// Seed for one context's downsampling draw, derived so different contexts
/// sample independently while staying reproducible across processes.
pub fn per_context_seed(base: u64, context_id: &str) -> u64 {
    let digest = Sha256::digest(context_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    base ^ u64::from_le_bytes(bytes)
}

/// Bounded-fanout map preserving item order in the results.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("slot filled"))
        .collect()
}
