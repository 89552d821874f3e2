//! Hypothetical-query generation: build the prompt for a context, call the
//! generator (chunking the context when it cannot fit the window), and parse
//! the response into a clean set of queries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{
    estimate_tokens, GenerationParams, Generator, GeneratorFingerprint, PromptWrapper,
};
use crate::types::ContextDoc;

pub const DEFAULT_TEMPLATE_ID: &str = "default";
pub const ARGUMENT_TEMPLATE_ID: &str = "argument";

const DEFAULT_TEMPLATE_BODY: &str = include_str!("../templates/default.txt");
const ARGUMENT_TEMPLATE_BODY: &str = include_str!("../templates/argument.txt");

const CONTEXT_PLACEHOLDER: &str = "{context}";

/// A question-generation prompt with a `{context}` placeholder.
///
/// Two templates ship built in: `default` asks for the questions a passage
/// can answer; `argument` asks for the topics a dialogue argues about, which
/// fits corpora whose queries are debate topics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub body: String,
}

impl PromptTemplate {
    /// Validates that the body carries exactly one `{context}` placeholder.
    pub fn new(template_id: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let template_id = template_id.into();
        let body = body.into();
        let placeholders = body.matches(CONTEXT_PLACEHOLDER).count();
        if placeholders != 1 {
            return Err(Error::Config(format!(
                "template {template_id:?} has {placeholders} {CONTEXT_PLACEHOLDER} placeholders, expected exactly 1"
            )));
        }
        Ok(PromptTemplate { template_id, body })
    }

    pub fn builtin(template_id: &str) -> Option<Self> {
        let body = match template_id {
            DEFAULT_TEMPLATE_ID => DEFAULT_TEMPLATE_BODY,
            ARGUMENT_TEMPLATE_ID => ARGUMENT_TEMPLATE_BODY,
            _ => return None,
        };
        Some(PromptTemplate {
            template_id: template_id.to_string(),
            body: body.to_string(),
        })
    }

    /// Loads `<dir>/<template_id>.txt`.
    pub fn from_file(template_id: &str, path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        PromptTemplate::new(template_id, body)
    }
}

/// The hypothetical queries generated for one context, with the generation
/// configuration they came from. Embeddings are attached later, aligned 1:1
/// with `queries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypotheticalQuerySet {
    pub context_id: String,
    pub fingerprint: GeneratorFingerprint,
    pub queries: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Vec<crate::embedding::Embedding>>,
}

/// Substitutes the context into the template. Titles are prepended to the
/// text with a newline. Pure literal substitution, no escaping.
pub fn build_prompt(context: &ContextDoc, template: &PromptTemplate) -> String {
    template
        .body
        .replace(CONTEXT_PLACEHOLDER, &context.rendered_text())
}

/// Parses a raw completion into query strings.
///
/// Lines are trimmed and leading list markers (`1.`, `2)`, `-`, `*`, `•`)
/// stripped repeatedly. Empty lines are dropped and exact duplicates are
/// removed keeping first occurrence order. Any surviving line reading
/// `no content` (case-insensitive, quotes and punctuation ignored) empties
/// the whole result, because that is the convention the prompt asks for.
pub fn parse_queries(raw: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in raw.lines() {
        let cleaned = strip_list_markers(line);
        if cleaned.is_empty() {
            continue;
        }
        if is_no_content(cleaned) {
            return Vec::new();
        }
        if !out.iter().any(|q| q == cleaned) {
            out.push(cleaned.to_string());
        }
    }
    out
}

/// Strips marker layers until none remain, so re-parsing parsed output is a
/// no-op.
fn strip_list_markers(line: &str) -> &str {
    let mut s = line.trim();
    loop {
        let stripped = strip_one_marker(s);
        if stripped == s {
            return s;
        }
        s = stripped;
    }
}

fn strip_one_marker(s: &str) -> &str {
    // digits followed by `.` or `)` then whitespace or end-of-line; the
    // whitespace requirement keeps decimals like "3.5 percent" intact
    let after_digits = s.trim_start_matches(|c: char| c.is_ascii_digit());
    if after_digits.len() < s.len() {
        if let Some(rest) = after_digits.strip_prefix(['.', ')']) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return rest.trim_start();
            }
        }
        return s;
    }
    if let Some(rest) = s.strip_prefix(['-', '*', '•']) {
        if rest.is_empty() || rest.starts_with(char::is_whitespace) {
            return rest.trim_start();
        }
    }
    s
}

fn is_no_content(line: &str) -> bool {
    let trimmed = line.trim_matches(|c: char| {
        c.is_whitespace() || matches!(c, '\'' | '"' | '`' | '.' | ',' | ';' | ':' | '!' | '?' | '(' | ')' | '[' | ']')
    });
    trimmed.eq_ignore_ascii_case("no content")
}

/// Splits `text` into chunks whose token estimate fits within
/// `budget_tokens - prompt_overhead_tokens`, preferring sentence boundaries
/// and hard-splitting single oversized sentences. Chunk concatenation
/// always equals the original text. `chars_per_token` is the estimation
/// ratio, normally the generator's own.
pub fn chunk_context(
    text: &str,
    budget_tokens: usize,
    prompt_overhead_tokens: usize,
    chars_per_token: usize,
) -> Vec<String> {
    assert!(
        budget_tokens > prompt_overhead_tokens,
        "chunk budget {budget_tokens} must exceed prompt overhead {prompt_overhead_tokens}"
    );
    let usable = budget_tokens - prompt_overhead_tokens;
    if estimate_tokens(text, chars_per_token) <= usable {
        return vec![text.to_string()];
    }

    let mut chunks: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut current_tokens = 0usize;
    for sentence in split_sentences(text) {
        let tokens = estimate_tokens(sentence, chars_per_token);
        if tokens > usable {
            if !current.is_empty() {
                chunks.push(std::mem::take(&mut current));
                current_tokens = 0;
            }
            // every char contributes at most one token, so pieces of
            // `usable` chars are guaranteed to fit
            chunks.extend(hard_split(sentence, usable));
        } else if !current.is_empty() && current_tokens + tokens > usable {
            chunks.push(std::mem::take(&mut current));
            current = sentence.to_string();
            current_tokens = tokens;
        } else {
            current.push_str(sentence);
            current_tokens += tokens;
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    if chunks.is_empty() {
        chunks.push(String::new());
    }
    chunks
}

/// Sentence-ish pieces that concatenate back to the input exactly. A piece
/// ends after `.`, `!`, `?`, or a newline, plus any following whitespace.
fn split_sentences(text: &str) -> Vec<&str> {
    let mut pieces = Vec::new();
    let mut start = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?' | '\n') {
            let mut end = i + c.len_utf8();
            while let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    end = j + next.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            pieces.push(&text[start..end]);
            start = end;
        }
    }
    if start < text.len() {
        pieces.push(&text[start..]);
    }
    pieces
}

fn hard_split(s: &str, max_chars: usize) -> Vec<String> {
    let max_chars = max_chars.max(1);
    let mut out = Vec::new();
    let mut count = 0usize;
    let mut start = 0usize;
    for (i, _) in s.char_indices() {
        if count == max_chars {
            out.push(s[start..i].to_string());
            start = i;
            count = 0;
        }
        count += 1;
    }
    if start < s.len() {
        out.push(s[start..].to_string());
    }
    out
}

/// Runs the full per-context flow: chunk, prompt, generate, parse, union.
///
/// A chunk answered with `No Content` contributes nothing but does not fail
/// the context. Embeddings are left unpopulated; the cache layer attaches
/// them.
pub fn generate_for_context(
    context: &ContextDoc,
    template: &PromptTemplate,
    generator: &dyn Generator,
    params: &GenerationParams,
    wrapper: &PromptWrapper,
) -> Result<HypotheticalQuerySet> {
    let window = generator.context_window_tokens();
    let ratio = generator.chars_per_token();
    let overhead = prompt_overhead_tokens(context, template, params, ratio);
    if overhead >= window {
        return Err(Error::WindowExceeded {
            needed: overhead + 1,
            window,
        });
    }

    let mut queries: Vec<String> = Vec::new();
    for chunk in chunk_context(&context.text, window, overhead, ratio) {
        let chunk_doc = ContextDoc {
            id: context.id.clone(),
            text: chunk,
            title: context.title.clone(),
        };
        let prompt = build_prompt(&chunk_doc, template);
        let raw = generator.generate(&prompt, params, wrapper)?;
        for query in parse_queries(&raw) {
            if !queries.contains(&query) {
                queries.push(query);
            }
        }
    }

    Ok(HypotheticalQuerySet {
        context_id: context.id.clone(),
        fingerprint: GeneratorFingerprint::new(
            generator.model_name(),
            &template.template_id,
            params,
            wrapper,
        ),
        queries,
        embeddings: None,
    })
}

/// Token overhead of everything in the prompt except the context text.
/// Computed over the template parts separately so the estimate stays an
/// upper bound under concatenation.
fn prompt_overhead_tokens(
    context: &ContextDoc,
    template: &PromptTemplate,
    params: &GenerationParams,
    chars_per_token: usize,
) -> usize {
    let (pre, post) = template
        .body
        .split_once(CONTEXT_PLACEHOLDER)
        .expect("template validated to hold one placeholder");
    let title_tokens = context
        .title
        .as_deref()
        .map(|t| estimate_tokens(t, chars_per_token) + 1)
        .unwrap_or(0);
    estimate_tokens(pre, chars_per_token)
        + estimate_tokens(post, chars_per_token)
        + title_tokens
        + params.max_output_tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::testing::ScriptedGenerator;
    use crate::providers::DEFAULT_CHARS_PER_TOKEN;
    use std::collections::BTreeMap;

    #[test]
    fn builtin_templates_have_one_placeholder() {
        for id in [DEFAULT_TEMPLATE_ID, ARGUMENT_TEMPLATE_ID] {
            let t = PromptTemplate::builtin(id).unwrap();
            assert_eq!(t.body.matches(CONTEXT_PLACEHOLDER).count(), 1, "{id}");
            PromptTemplate::new(id, t.body).unwrap();
        }
        assert!(PromptTemplate::builtin("nope").is_none());
    }

    #[test]
    fn template_rejects_wrong_placeholder_count() {
        assert!(PromptTemplate::new("t", "no placeholder").is_err());
        assert!(PromptTemplate::new("t", "{context} and {context}").is_err());
    }

    #[test]
    fn build_prompt_substitutes_passage() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let prompt = build_prompt(&ContextDoc::new("d", "X"), &t);
        assert!(prompt.contains("```<passage>\nX\n</passage>'''"));
    }

    #[test]
    fn build_prompt_prepends_title() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let doc = ContextDoc::new("d", "Body").with_title("Title");
        let prompt = build_prompt(&doc, &t);
        assert!(prompt.contains("```<passage>\nTitle\nBody\n</passage>'''"));
    }

    #[test]
    fn build_prompt_empty_text_keeps_empty_section() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let prompt = build_prompt(&ContextDoc::new("d", ""), &t);
        assert!(prompt.contains("```<passage>\n\n</passage>'''"));
    }

    #[test]
    fn build_prompt_passes_backticks_verbatim() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let prompt = build_prompt(&ContextDoc::new("d", "a```b"), &t);
        assert!(prompt.contains("```<passage>\na```b\n</passage>'''"));
    }

    #[test]
    fn parse_strips_numbered_markers() {
        assert_eq!(
            parse_queries("1. What is X?\n2. Why Y?"),
            vec!["What is X?", "Why Y?"]
        );
    }

    #[test]
    fn parse_no_content_returns_empty() {
        assert!(parse_queries("No Content").is_empty());
        assert!(parse_queries("'no content'").is_empty());
        assert!(parse_queries("No content.").is_empty());
        assert!(parse_queries("Q1\nNo Content\nQ2").is_empty());
    }

    #[test]
    fn parse_dedups_and_skips_blank_lines() {
        assert_eq!(parse_queries("- Q1\n\n- Q1\n- Q2"), vec!["Q1", "Q2"]);
    }

    #[test]
    fn parse_keeps_decimals_intact() {
        assert_eq!(parse_queries("3.5 percent of what?"), vec!["3.5 percent of what?"]);
    }

    #[test]
    fn parse_handles_bullets_and_parens() {
        assert_eq!(
            parse_queries("• Bullet?\n* Star?\n7) Paren?"),
            vec!["Bullet?", "Star?", "Paren?"]
        );
    }

    #[test]
    fn parse_is_idempotent_on_marker_stacks() {
        let parsed = parse_queries("- - 1. Q?");
        assert_eq!(parsed, vec!["Q?"]);
        assert_eq!(parse_queries(&parsed.join("\n")), parsed);
    }

    #[test]
    fn chunk_short_text_is_identity() {
        assert_eq!(chunk_context("short text.", 100, 10, 4), vec!["short text."]);
    }

    #[test]
    fn chunk_empty_text_yields_single_empty_chunk() {
        assert_eq!(chunk_context("", 100, 10, 4), vec![String::new()]);
    }

    #[test]
    fn chunk_long_text_is_lossless_and_fits() {
        let text = "Alpha beta gamma delta. Epsilon zeta eta theta. Iota kappa lambda mu. Nu xi omicron pi. Rho sigma tau upsilon. Phi chi psi omega.".repeat(4);
        let budget = 40;
        let overhead = 10;
        let chunks = chunk_context(&text, budget, overhead, DEFAULT_CHARS_PER_TOKEN);
        assert!(chunks.len() >= 2);
        assert_eq!(chunks.concat(), text);
        for chunk in &chunks {
            assert!(estimate_tokens(chunk, DEFAULT_CHARS_PER_TOKEN) <= budget - overhead);
        }
    }

    #[test]
    fn chunk_unbroken_text_hard_splits() {
        let text = "x".repeat(4000);
        let chunks = chunk_context(&text, 50, 10, DEFAULT_CHARS_PER_TOKEN);
        assert!(chunks.len() > 1);
        assert_eq!(chunks.concat(), text);
        for chunk in &chunks {
            assert!(estimate_tokens(chunk, DEFAULT_CHARS_PER_TOKEN) <= 40);
        }
    }

    #[test]
    fn generate_single_chunk_passthrough() {
        let mut scripts = BTreeMap::new();
        scripts.insert("apples".to_string(), vec!["Q one?\nQ two?".to_string()]);
        let generator = ScriptedGenerator::new(scripts, 3900);
        let set = generate_for_context(
            &ContextDoc::new("d1", "apples"),
            &PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap(),
            &generator,
            &GenerationParams { max_output_tokens: 64, ..Default::default() },
            &PromptWrapper::openai(),
        )
        .unwrap();
        assert_eq!(set.queries, vec!["Q one?", "Q two?"]);
        assert_eq!(set.context_id, "d1");
        assert!(set.embeddings.is_none());
    }

    #[test]
    fn generate_unions_chunks_without_duplicates() {
        // text split into two chunks; both scripted responses share a line
        let sentence_a = "Aaaa bbbb cccc dddd eeee ffff. ";
        let sentence_b = "Gggg hhhh iiii jjjj kkkk llll.";
        let text = format!("{sentence_a}{sentence_b}");
        let mut scripts = BTreeMap::new();
        scripts.insert(sentence_a.to_string(), vec!["Shared?\nFrom A?".to_string()]);
        scripts.insert(sentence_b.to_string(), vec!["Shared?\nFrom B?".to_string()]);
        let params = GenerationParams { max_output_tokens: 50, ..Default::default() };
        // window sized so one sentence fits per chunk but two do not
        let template = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let (pre, post) = template.body.split_once("{context}").unwrap();
        let overhead = estimate_tokens(pre, DEFAULT_CHARS_PER_TOKEN)
            + estimate_tokens(post, DEFAULT_CHARS_PER_TOKEN)
            + params.max_output_tokens;
        let generator = ScriptedGenerator::new(scripts, overhead + 10);
        let set = generate_for_context(
            &ContextDoc::new("d2", &text),
            &PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap(),
            &generator,
            &params,
            &PromptWrapper::openai(),
        )
        .unwrap();
        assert_eq!(set.queries, vec!["Shared?", "From A?", "From B?"]);
    }

    #[test]
    fn generator_ratio_drives_chunking() {
        // at one char per token the same text needs more chunks than at four
        let text = "Aaaa bbbb cccc dddd. Eeee ffff gggg hhhh. Iiii jjjj kkkk llll.";
        let coarse = chunk_context(text, 40, 10, 4);
        let fine = chunk_context(text, 40, 10, 1);
        assert!(fine.len() > coarse.len(), "{} vs {}", fine.len(), coarse.len());
        assert_eq!(fine.concat(), text);

        let generator = ScriptedGenerator::new(BTreeMap::new(), 3900).with_chars_per_token(1);
        assert_eq!(generator.chars_per_token(), 1);
    }

    #[test]
    fn generate_empty_context_is_empty_set() {
        let generator = ScriptedGenerator::new(BTreeMap::new(), 3900);
        let set = generate_for_context(
            &ContextDoc::new("d3", ""),
            &PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap(),
            &generator,
            &GenerationParams { max_output_tokens: 64, ..Default::default() },
            &PromptWrapper::openai(),
        )
        .unwrap();
        assert!(set.queries.is_empty());
    }
}
