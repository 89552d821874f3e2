//! Embedding vectors and the similarity primitives used by every scorer.
//!
//! Two modes are supported: full cosine similarity, and the raw inner
//! product. The raw mode exists because some embedding models rank better
//! when the query-to-hypothetical-query term is left unnormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-dimension vector produced by an embedding model.
///
/// Immutable after construction: embeddings are cached on disk and shared
/// across concurrent scoring workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    /// Validates that the vector is non-empty and every value is finite.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim >= 1".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// L2 norm, accumulated in double precision.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// How to combine two embeddings into a scalar similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Inner product normalized by both L2 norms. Requires nonzero vectors.
    Cosine,
    /// Raw inner product, no normalization.
    InnerProduct,
}

/// Dot product of two equal-dimension embeddings.
pub fn inner_product(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .sum::<f64>())
}

/// Similarity under the given mode.
///
/// Zero-norm vectors in cosine mode are an error rather than a silent 0:
/// they indicate an upstream embedder fault and must surface.
pub fn similarity(a: &Embedding, b: &Embedding, mode: SimilarityMode) -> Result<f64> {
    let dot = inner_product(a, b)?;
    match mode {
        SimilarityMode::InnerProduct => Ok(dot),
        SimilarityMode::Cosine => {
            let na = a.norm();
            let nb = b.norm();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(dot / (na * nb))
        }
    }
}
