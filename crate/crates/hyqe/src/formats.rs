//! Standard IR file formats: JSONL corpus and queries, qrels in the
//! four-column whitespace format or the header TSV variant, and six-column
//! run files.
//!
//! Loaders validate invariants and name the offending line on failure.
//! Writers emit a canonical form: queries sorted by id, entries by rank,
//! floats in shortest round-trip notation, so write-then-read is identity
//! and read-then-write is byte-identical on canonical files.

use std::collections::HashSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::{validate_ranking, Qrels, RankedRun, RunEntry};
use crate::types::{ContextDoc, Query};

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path_str(path),
        line,
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct CorpusLine {
    _id: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    text: String,
}

/// One JSON object per line with fields `_id`, `title` (optional), `text`.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ContextDoc>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CorpusLine = serde_json::from_str(line)
            .map_err(|e| parse_err(path, line_no, format!("bad corpus record: {e}")))?;
        if !seen.insert(parsed._id.clone()) {
            return Err(Error::DuplicateId {
                id: parsed._id,
                path: path_str(path),
                line: line_no,
            });
        }
        docs.push(ContextDoc {
            id: parsed._id,
            text: parsed.text,
            title: parsed.title.filter(|t| !t.is_empty()),
        });
    }
    Ok(docs)
}

#[derive(Deserialize)]
struct QueryLine {
    _id: String,
    text: String,
}

/// One JSON object per line with fields `_id`, `text` (non-empty).
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut queries = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: QueryLine = serde_json::from_str(line)
            .map_err(|e| parse_err(path, line_no, format!("bad query record: {e}")))?;
        if parsed.text.trim().is_empty() {
            return Err(parse_err(path, line_no, "query text is empty"));
        }
        if !seen.insert(parsed._id.clone()) {
            return Err(Error::DuplicateId {
                id: parsed._id,
                path: path_str(path),
                line: line_no,
            });
        }
        queries.push(Query {
            id: parsed._id,
            text: parsed.text,
        });
    }
    Ok(queries)
}

/// Accepts the four-column `query_id iteration doc_id grade` format
/// (iteration ignored) and the two-column-header TSV variant
/// `query-id<TAB>corpus-id<TAB>score`.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut qrels = Qrels::new();
    let mut lines = text.lines().enumerate().peekable();

    let tsv_header = lines
        .peek()
        .map(|(_, first)| {
            let cols: Vec<&str> = first.split('\t').map(str::trim).collect();
            cols.len() >= 2 && cols[0] == "query-id" && cols[1] == "corpus-id"
        })
        .unwrap_or(false);
    if tsv_header {
        lines.next();
    }

    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (query_id, doc_id, grade_text) = if tsv_header {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected 3 tab-separated columns, got {}", cols.len()),
                ));
            }
            (cols[0], cols[1], cols[2])
        } else {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("expected 4 whitespace-separated columns, got {}", cols.len()),
                ));
            }
            (cols[0], cols[2], cols[3])
        };
        let grade: i64 = grade_text
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad relevance grade {grade_text:?}")))?;
        if grade < 0 {
            return Err(parse_err(path, line_no, format!("negative grade {grade}")));
        }
        qrels.insert(query_id, doc_id, grade as u32);
    }
    Ok(qrels)
}

/// Canonical four-column form, iteration written as 0.
pub fn write_qrels(path: impl AsRef<Path>, qrels: &Qrels) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for (query_id, docs) in qrels.iter() {
        for (doc_id, grade) in docs {
            writeln!(out, "{query_id} 0 {doc_id} {grade}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Six-column run lines `query_id Q0 doc_id rank score tag`. Entries are
/// normalized to rank order, then the per-query invariants are enforced.
pub fn read_run(path: impl AsRef<Path>) -> Result<RankedRun> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut tag: Option<String> = None;
    // preserve first-seen query order only for error reporting; storage sorts
    let mut per_query: std::collections::BTreeMap<String, Vec<(usize, RunEntry)>> =
        std::collections::BTreeMap::new();

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 6 columns, got {}", cols.len()),
            ));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad rank {:?}", cols[3])))?;
        if rank == 0 {
            return Err(parse_err(path, line_no, "ranks are 1-based"));
        }
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad score {:?}", cols[4])))?;
        if tag.is_none() {
            tag = Some(cols[5].to_string());
        }
        let entries = per_query.entry(cols[0].to_string()).or_default();
        if entries.iter().any(|(_, e): &(usize, RunEntry)| e.doc_id == cols[2]) {
            return Err(Error::DuplicateId {
                id: cols[2].to_string(),
                path: path_str(path),
                line: line_no,
            });
        }
        entries.push((
            line_no,
            RunEntry {
                doc_id: cols[2].to_string(),
                score,
                rank,
            },
        ));
    }

    let mut run = RankedRun::new(tag.unwrap_or_else(|| "run".to_string()));
    for (query_id, mut entries) in per_query {
        entries.sort_by_key(|(_, e)| e.rank);
        let first_line = entries.first().map(|(l, _)| *l).unwrap_or(0);
        let ordered: Vec<RunEntry> = entries.into_iter().map(|(_, e)| e).collect();
        validate_ranking(&query_id, &ordered).map_err(|e| {
            parse_err(path, first_line, format!("invalid ranking: {e}"))
        })?;
        run.set_ranking(query_id, ordered)?;
    }
    Ok(run)
}

/// Canonical emission: queries sorted by id, entries by rank.
pub fn write_run(path: impl AsRef<Path>, run: &RankedRun) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for (query_id, entries) in run.iter() {
        for entry in entries {
            writeln!(
                out,
                "{query_id} Q0 {} {} {} {}",
                entry.doc_id, entry.rank, entry.score, run.tag
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
