//! Identified text units: queries, corpus contexts, and scored results.

use serde::{Deserialize, Serialize};

/// A user query with an opaque identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// A corpus passage. Text may be empty; empty contexts flow through the
/// pipeline but yield empty hypothetical-query sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextDoc {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl ContextDoc {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        ContextDoc {
            id: id.into(),
            text: text.into(),
            title: None,
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    /// Title and text joined by a newline; what prompts and embedders see.
    pub fn rendered_text(&self) -> String {
        match &self.title {
            Some(t) if !t.is_empty() => format!("{t}\n{}", self.text),
            _ => self.text.clone(),
        }
    }
}

/// One entry of a ranked list. Ranks are 1-based; within a list they form
/// a permutation of 1..=n and scores are non-increasing with rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContext {
    pub context_id: String,
    pub score: f64,
    pub rank: usize,
}
