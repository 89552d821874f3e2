//! Minimal rerank service: POST /rerank with a query and candidates,
//! sharing the exact batch ranking code path and cache.

use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::json;

use hyqe::cache::QueryCache;
use hyqe::pipeline::{compose_hyde, rank, CandidateList, HydeMode, PipelineDeps};
use hyqe::types::{ContextDoc, Query};

use crate::config::Runtime;
use crate::manifest::{default_manifest_path, ManifestBuilder};

#[derive(Debug, Deserialize)]
struct RerankRequest {
    query: String,
    candidates: Vec<RequestCandidate>,
}

#[derive(Debug, Deserialize)]
struct RequestCandidate {
    id: String,
    text: String,
    #[serde(default)]
    baseline_score: f64,
}

#[derive(Debug, Serialize)]
struct ResponseEntry {
    id: String,
    rank: usize,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    qc_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qh_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    best_hyp_index: Option<usize>,
}

pub fn cmd_serve(
    runtime: &Runtime,
    bind: &str,
    cache_path: &Path,
    manifest_path: Option<std::path::PathBuf>,
    handler_threads: usize,
) -> anyhow::Result<()> {
    let cache = Arc::new(QueryCache::open(cache_path)?);
    let server = Arc::new(
        tiny_http::Server::http(bind).map_err(|e| anyhow::anyhow!("binding {bind}: {e}"))?,
    );
    let local = server
        .server_addr()
        .to_ip()
        .context("server address is not an ip socket")?;

    let mut manifest = ManifestBuilder::new("serve", runtime.snapshot.clone());
    manifest.input("cache", cache_path);
    manifest.output("endpoint", format!("http://{local}/rerank"));
    let manifest_path = manifest_path.unwrap_or_else(|| default_manifest_path(cache_path, "serve"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;

    // tests and scripts scrape this line for the bound port
    println!("listening on http://{local}");
    use std::io::Write;
    std::io::stdout().flush().ok();

    std::thread::scope(|scope| {
        for _ in 0..handler_threads.max(1) {
            let server = server.clone();
            let cache = cache.clone();
            scope.spawn(move || {
                for request in server.incoming_requests() {
                    handle(request, runtime, &cache);
                }
            });
        }
    });
    Ok(())
}

fn handle(mut request: tiny_http::Request, runtime: &Runtime, cache: &QueryCache) {
    let (status, body) = match route(&mut request, runtime, cache) {
        Ok(body) => (200, body),
        Err(failure) => failure,
    };
    let response = tiny_http::Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(
            tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..])
                .expect("static header"),
        );
    let _ = request.respond(response);
}

type Failure = (u16, serde_json::Value);

fn route(
    request: &mut tiny_http::Request,
    runtime: &Runtime,
    cache: &QueryCache,
) -> Result<serde_json::Value, Failure> {
    if request.url() != "/rerank" {
        return Err((404, json!({ "error": "unknown path; POST /rerank" })));
    }
    if request.method() != &tiny_http::Method::Post {
        return Err((405, json!({ "error": "method not allowed; POST /rerank" })));
    }
    let mut body = String::new();
    if request.as_reader().read_to_string(&mut body).is_err() {
        return Err((400, json!({ "error": "unreadable request body" })));
    }
    let parsed: RerankRequest = serde_json::from_str(&body)
        .map_err(|e| (400, json!({ "error": format!("malformed request: {e}") })))?;
    if parsed.candidates.is_empty() {
        return Err((400, json!({ "error": "candidates must be non-empty" })));
    }

    // accept any candidate order; rank by the supplied baseline scores
    let mut candidates: Vec<RequestCandidate> = parsed.candidates;
    candidates.sort_by(|a, b| b.baseline_score.total_cmp(&a.baseline_score));
    let list = CandidateList::new(
        Query {
            id: "request".to_string(),
            text: parsed.query,
        },
        candidates
            .into_iter()
            .map(|c| (ContextDoc::new(c.id, c.text), c.baseline_score))
            .collect(),
    )
    .map_err(|e| (400, json!({ "error": e.to_string() })))?;

    let deps = PipelineDeps {
        generator: &runtime.generator,
        embedder: &runtime.embedder,
        cache,
        template: &runtime.template,
        params: &runtime.params,
        wrapper: &runtime.wrapper,
    };
    let cfg = &runtime.pipeline;
    let output = match cfg.hyde {
        HydeMode::Off => rank(&list, cfg, &deps),
        _ => compose_hyde(&list, cfg, &deps),
    }
    .map_err(|e| (502, json!({ "error": e.to_string() })))?;

    let results: Vec<ResponseEntry> = output
        .ranking
        .iter()
        .map(|scored| {
            let breakdown = output.breakdowns.get(&scored.context_id);
            ResponseEntry {
                id: scored.context_id.clone(),
                rank: scored.rank,
                score: scored.score,
                qc_term: breakdown.map(|b| b.qc_term),
                qh_term: breakdown.map(|b| b.qh_term),
                best_hyp_index: breakdown.and_then(|b| b.best_hyp_index),
            }
        })
        .collect();

    Ok(json!({ "results": results, "incidents": output.incidents }))
}
