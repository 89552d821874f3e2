//! The re-ranking score: query-context similarity plus a weighted
//! query-to-hypothetical-query term.
//!
//! The hypothetical term aggregates with `max` (the primary variant) or
//! `mean` (a softer alternative). With nonempty hypothetical sets and equal
//! inputs, `max` always dominates `mean`, and growing the hypothetical set
//! can only raise the `max` variant; both facts are pinned by tests because
//! they are what downsampling experiments lean on.

use serde::{Deserialize, Serialize};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{similarity, Embedding, SimilarityMode};
use crate::error::Result;
use crate::hypquery::HypotheticalQuerySet;

/// How the per-hypothetical similarities collapse into one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Max,
    Mean,
}

/// Downsampling of the hypothetical set before scoring, seeded for
/// reproducibility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownsampleConfig {
    /// Kept fraction in (0, 1]; the kept count is `ceil(ratio * n)`, so a
    /// nonzero ratio never empties a nonempty set.
    pub ratio: f64,
    pub seed: u64,
}

/// Full scoring configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Weight of the hypothetical-query term. Zero recovers the plain
    /// query-context similarity ranking.
    pub lambda: f64,
    pub aggregation: Aggregation,
    /// Similarity mode for the query-context term.
    pub qc_mode: SimilarityMode,
    /// Similarity mode for the query-hypothetical term. Kept separate
    /// because some embedding models rank better with this term left as a
    /// raw inner product.
    pub qh_mode: SimilarityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsample: Option<DownsampleConfig>,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            lambda: 1.0,
            aggregation: Aggregation::Max,
            qc_mode: SimilarityMode::Cosine,
            qh_mode: SimilarityMode::Cosine,
            downsample: None,
        }
    }
}

/// Default weight for well-known embedding model families, matched
/// case-insensitively on the model name.
pub fn default_lambda_for_model(model_name: &str) -> Option<f64> {
    let name = model_name.to_lowercase();
    // order matters only for readability; the families do not overlap
    if name.contains("bge-base-en-v1.5") {
        Some(0.03)
    } else if name.contains("contriever") {
        Some(2.0)
    } else if name.contains("e5-large-v2") || name.contains("nomic-embed-text-v1.5") {
        Some(0.5)
    } else if name.contains("text-embedding-3-large") {
        Some(0.3)
    } else {
        None
    }
}

impl ScoreConfig {
    /// Per-model defaults: the tuned lambda, and for bge the unnormalized
    /// query-hypothetical term that the small lambda is calibrated against.
    pub fn for_model(model_name: &str) -> Self {
        let mut cfg = ScoreConfig::default();
        if let Some(lambda) = default_lambda_for_model(model_name) {
            cfg.lambda = lambda;
        }
        if model_name.to_lowercase().contains("bge-base-en-v1.5") {
            cfg.qh_mode = SimilarityMode::InnerProduct;
        }
        cfg
    }
}

/// A score split into its parts, so callers can explain a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    /// `qc_term + lambda * qh_term`; equals `qc_term` when the hypothetical
    /// set is empty.
    pub total: f64,
    pub qc_term: f64,
    /// Pre-lambda aggregate over the hypothetical similarities; 0 for an
    /// empty set.
    pub qh_term: f64,
    /// Index of the winning hypothetical query under `max` aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_hyp_index: Option<usize>,
}

/// Scores one context against a query.
///
/// An empty hypothetical set contributes zero rather than failing: the max
/// over an empty set is undefined, and a zero keeps no-content contexts
/// comparable to the plain-similarity baseline instead of sinking them.
pub fn score(
    q_emb: &Embedding,
    c_emb: &Embedding,
    hyp_embs: &[Embedding],
    cfg: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    let qc_term = similarity(q_emb, c_emb, cfg.qc_mode)?;
    if hyp_embs.is_empty() {
        return Ok(ScoreBreakdown {
            total: qc_term,
            qc_term,
            qh_term: 0.0,
            best_hyp_index: None,
        });
    }

    let mut sims = Vec::with_capacity(hyp_embs.len());
    for hyp in hyp_embs {
        sims.push(similarity(q_emb, hyp, cfg.qh_mode)?);
    }
    let (qh_term, best_hyp_index) = match cfg.aggregation {
        Aggregation::Max => {
            let (idx, best) = sims
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("nonempty similarity list");
            (*best, Some(idx))
        }
        Aggregation::Mean => (sims.iter().sum::<f64>() / sims.len() as f64, None),
    };

    Ok(ScoreBreakdown {
        total: qc_term + cfg.lambda * qh_term,
        qc_term,
        qh_term,
        best_hyp_index,
    })
}

/// Uniformly samples `ceil(ratio * n)` queries without replacement, keeping
/// query/embedding alignment and original relative order. Deterministic for
/// a fixed seed; `ratio = 1` returns the input untouched.
pub fn downsample(hyps: &HypotheticalQuerySet, ratio: f64, seed: u64) -> HypotheticalQuerySet {
    assert!(
        ratio > 0.0 && ratio <= 1.0,
        "downsample ratio must be in (0, 1], got {ratio}"
    );
    let n = hyps.queries.len();
    if ratio >= 1.0 || n == 0 {
        return hyps.clone();
    }
    let keep = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    if keep == n {
        return hyps.clone();
    }

    // partial Fisher-Yates over the index vector; hand-rolled so the
    // sequence is pinned by this code alone, not a sampling library
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..keep {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        indices.swap(i, j);
    }
    let mut kept: Vec<usize> = indices[..keep].to_vec();
    kept.sort_unstable();

    HypotheticalQuerySet {
        context_id: hyps.context_id.clone(),
        fingerprint: hyps.fingerprint.clone(),
        queries: kept.iter().map(|&i| hyps.queries[i].clone()).collect(),
        embeddings: hyps
            .embeddings
            .as_ref()
            .map(|embs| kept.iter().map(|&i| embs[i].clone()).collect()),
    }
}
