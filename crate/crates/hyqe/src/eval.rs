//! Graded-relevance NDCG@k evaluation.
//!
//! Uses the `2^rel - 1` gain with a `log2(i+1)` discount, the convention of
//! trec_eval and the standard retrieval benchmarks, so numbers line up with
//! the usual tooling. The ideal DCG is computed over all judged documents
//! for a query, not just the retrieved ones, which penalizes failing to
//! retrieve a relevant document at all.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ScoredContext;

/// Relevance judgments: query id -> document id -> grade. Pairs absent
/// from the map implicitly carry grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.judgments
            .get(query_id)
            .and_then(|docs| docs.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn judged(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, u32>)> {
        self.judgments.iter().map(|(q, docs)| (q.as_str(), docs))
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// One line of a ranked run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// A named ranked run: per query, an ordered list of scored documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRun {
    pub tag: String,
    rankings: BTreeMap<String, Vec<RunEntry>>,
}

impl RankedRun {
    pub fn new(tag: impl Into<String>) -> Self {
        RankedRun {
            tag: tag.into(),
            rankings: BTreeMap::new(),
        }
    }

    /// Validates ranks 1..=n, non-increasing scores, and distinct ids.
    pub fn set_ranking(&mut self, query_id: impl Into<String>, entries: Vec<RunEntry>) -> Result<()> {
        let query_id = query_id.into();
        validate_ranking(&query_id, &entries)?;
        self.rankings.insert(query_id, entries);
        Ok(())
    }

    /// Adapter from the scorer's output type.
    pub fn set_from_scored(
        &mut self,
        query_id: impl Into<String>,
        scored: &[ScoredContext],
    ) -> Result<()> {
        let entries = scored
            .iter()
            .map(|s| RunEntry {
                doc_id: s.context_id.clone(),
                score: s.score,
                rank: s.rank,
            })
            .collect();
        self.set_ranking(query_id, entries)
    }

    pub fn ranking(&self, query_id: &str) -> Option<&[RunEntry]> {
        self.rankings.get(query_id).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.rankings.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[RunEntry])> {
        self.rankings.iter().map(|(q, e)| (q.as_str(), e.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

pub(crate) fn validate_ranking(query_id: &str, entries: &[RunEntry]) -> Result<()> {
    let mut seen_ranks = vec![false; entries.len()];
    let mut prev_score = f64::INFINITY;
    for (i, entry) in entries.iter().enumerate() {
        if entry.rank == 0 || entry.rank > entries.len() || seen_ranks[entry.rank - 1] {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: ranks must form a permutation of 1..={}, got {} at position {i}",
                entries.len(),
                entry.rank
            )));
        }
        seen_ranks[entry.rank - 1] = true;
        if entry.rank as i64 - 1 != i as i64 {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: entries must be ordered by rank, got rank {} at position {i}",
                entry.rank
            )));
        }
        if entry.score > prev_score {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: scores must be non-increasing, {} follows {prev_score}",
                entry.score
            )));
        }
        prev_score = entry.score;
        if entries[..i].iter().any(|e| e.doc_id == entry.doc_id) {
            return Err(Error::InvalidInput(format!(
                "query {query_id}: duplicate doc id {:?}",
                entry.doc_id
            )));
        }
    }
    Ok(())
}

fn dcg(grades_in_rank_order: impl Iterator<Item = u32>, k: usize) -> f64 {
    grades_in_rank_order
        .take(k)
        .enumerate()
        .map(|(i, grade)| ((2.0f64).powi(grade as i32) - 1.0) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k of a ranking against graded judgments.
///
/// The ideal DCG sorts all judged grades descending; when it is zero (no
/// positive grades) the result is 0 by convention.
pub fn ndcg_at_k(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    assert!(k >= 1, "ndcg cutoff must be >= 1");
    let gained = dcg(ranking.iter().map(|id| grades.get(id).copied().unwrap_or(0)), k);
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let ideal_dcg = dcg(ideal.into_iter(), k);
    if ideal_dcg == 0.0 {
        0.0
    } else {
        gained / ideal_dcg
    }
}

/// Evaluation output: per-query scores over queries that carry at least one
/// positive judgment, their unweighted mean, and the all-zero-grade queries
/// that were skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: BTreeMap<String, f64>,
    pub mean: f64,
    pub skipped: Vec<String>,
}

/// Scores a run against qrels at cutoff `k`.
///
/// Judged queries missing from the run score 0 and stay in the mean; run
/// queries without judgments are ignored. A run sharing no query id with
/// the qrels is an error rather than a vacuous 0.
pub fn evaluate(run: &RankedRun, qrels: &Qrels, k: usize) -> Result<EvalReport> {
    let shares_any = qrels.query_ids().any(|q| run.ranking(q).is_some());
    if !shares_any {
        return Err(Error::EmptyEvaluation);
    }

    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for (query_id, grades) in qrels.iter() {
        if grades.values().all(|g| *g == 0) {
            skipped.push(query_id.to_string());
            continue;
        }
        let ranking: Vec<String> = run
            .ranking(query_id)
            .map(|entries| entries.iter().map(|e| e.doc_id.clone()).collect())
            .unwrap_or_default();
        per_query.insert(query_id.to_string(), ndcg_at_k(&ranking, grades, k));
    }

    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    Ok(EvalReport {
        per_query,
        mean,
        skipped,
    })
}



#[cfg(test)]
mod proptests {
    use super::oracle::ndcg_oracle;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// matches the permutation oracle on small judged sets
        #[test]
        fn matches_brute_force_oracle(
            grades_vec in proptest::collection::vec(0u32..4, 1..6),
            extra_ranked in 0usize..3,
            k in 1usize..8,
            seed in any::<u64>(),
        ) {
            let judged: BTreeMap<String, u32> = grades_vec
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("d{i}"), *g))
                .collect();
            // ranking: a shuffle of judged docs plus some unjudged ones
            let mut ids: Vec<String> = judged.keys().cloned().collect();
            let mut state = seed;
            for i in (1..ids.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ids.swap(i, (state >> 33) as usize % (i + 1));
            }
            for e in 0..extra_ranked {
                ids.push(format!("x{e}"));
            }
            let fast = ndcg_at_k(&ids, &judged, k);
            let slow = ndcg_oracle(&ids, &judged, k);
            prop_assert!((fast - slow).abs() < 1e-12, "fast {fast} vs oracle {slow}");
        }

        /// bounded in [0, 1]
        #[test]
        fn ndcg_is_bounded(
            grades_vec in proptest::collection::vec(0u32..5, 1..10),
            k in 1usize..12,
        ) {
            let judged: BTreeMap<String, u32> = grades_vec
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("d{i}"), *g))
                .collect();
            let ids: Vec<String> = judged.keys().cloned().collect();
            let got = ndcg_at_k(&ids, &judged, k);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        }

        /// swapping a lower grade above a higher grade never raises the score
        #[test]
        fn adjacent_bad_swap_never_helps(
            grades_vec in proptest::collection::vec(0u32..4, 2..8),
            pos in 0usize..7,
            k in 1usize..10,
        ) {
            let judged: BTreeMap<String, u32> = grades_vec
                .iter()
                .enumerate()
                .map(|(i, g)| (format!("d{i}"), *g))
                .collect();
            let mut ids: Vec<String> = (0..grades_vec.len()).map(|i| format!("d{i}")).collect();
            let i = pos % (ids.len() - 1);
            let gi = judged[&ids[i]];
            let gj = judged[&ids[i + 1]];
            let before = ndcg_at_k(&ids, &judged, k);
            // move the lower-graded doc up
            if gj < gi {
                ids.swap(i, i + 1);
                let after = ndcg_at_k(&ids, &judged, k);
                prop_assert!(after <= before + 1e-12);
            }
        }
    }
}
