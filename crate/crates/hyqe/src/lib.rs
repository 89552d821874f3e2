//! Context re-ranking with hypothetical queries.
//!
//! Retrieval by embedding similarity alone ranks passages by how much they
//! *look like* the query, which is not the same as how well they *answer*
//! it. This crate reorders a retrieved candidate list by asking a text
//! generator, once per passage, which questions that passage can answer;
//! a passage is then scored by blending its direct similarity to the query
//! with the similarity between the query and the best of those generated
//! questions:
//!
//! ```text
//! score(query, ctx) = sim(query, ctx) + lambda * max over H(ctx) of sim(h, query)
//! ```
//!
//! where `H(ctx)` is the generated question set (a `mean` aggregation is
//! available as an alternative to `max`). Generation is independent of the
//! incoming query, so `H(ctx)` is computed once per corpus passage and
//! served from a persistent cache afterwards; steady-state ranking costs
//! one query embedding plus dot products.
//!
//! Module map:
//!
//! - [`embedding`] — vectors and similarity primitives
//! - [`types`] — queries, contexts, scored results
//! - [`providers`] — generator/embedder traits, the OpenAI-compatible
//!   client, and deterministic test doubles
//! - [`hypquery`] — prompts, response parsing, window-aware chunking
//! - [`cache`] — the persistent hypothetical-query store
//! - [`scoring`] — the blended score and downsampling
//! - [`pipeline`] — end-to-end re-ranking and query-expansion composition
//! - [`eval`] — NDCG@k over graded judgments
//! - [`formats`] — corpus/queries/qrels/run file IO

pub mod cache;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod formats;
pub mod hypquery;
pub mod pipeline;
pub mod providers;
pub mod scoring;
pub mod types;

pub use embedding::{inner_product, similarity, Embedding, SimilarityMode};
pub use error::{Error, Result};
pub use types::{ContextDoc, Query, ScoredContext};
