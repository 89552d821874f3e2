//! Batch commands: pregeneration, reranking, evaluation, parameter sweeps,
//! downsampling trials, and embedding export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context};
use serde_json::json;

use hyqe::cache::{CacheKey, GenerateDeps, QueryCache};
use hyqe::eval::{evaluate, RankedRun};
use hyqe::formats::{load_corpus, load_qrels, load_queries, read_run, write_run};
use hyqe::pipeline::{compose_hyde, rank, CandidateList, HydeMode, PipelineDeps, RankOutput};
use hyqe::scoring::DownsampleConfig;
use hyqe::types::{ContextDoc, Query};

use crate::config::Runtime;
use crate::manifest::{default_manifest_path, ManifestBuilder};

/// Bounded worker pool preserving input order in the results.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot").expect("filled"))
        .collect()
}

fn deps_for<'a>(runtime: &'a Runtime, cache: &'a QueryCache) -> PipelineDeps<'a> {
    PipelineDeps {
        generator: &runtime.generator,
        embedder: &runtime.embedder,
        cache,
        template: &runtime.template,
        params: &runtime.params,
        wrapper: &runtime.wrapper,
    }
}

pub fn cmd_pregen(
    runtime: &Runtime,
    corpus_path: &Path,
    cache_path: &Path,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new("pregen", runtime.snapshot.clone());
    manifest.input("corpus", corpus_path);
    manifest.output("cache", cache_path);

    let corpus = load_corpus(corpus_path)?;
    let cache = QueryCache::open(cache_path)?;
    manifest.stage("load");

    let deps = GenerateDeps {
        generator: &runtime.generator,
        embedder: &runtime.embedder,
        template: &runtime.template,
        params: &runtime.params,
        wrapper: &runtime.wrapper,
    };
    let fingerprint = hyqe::providers::GeneratorFingerprint::new(
        runtime.generator.model_name(),
        &runtime.template.template_id,
        &runtime.params,
        &runtime.wrapper,
    );

    let failures: Vec<String> = parallel_map(&corpus, runtime.pipeline.concurrency, |doc| {
        let key = CacheKey::new(doc.id.clone(), fingerprint.clone());
        match cache.get_or_generate(&key, doc, &deps) {
            Ok(_) => None,
            Err(err) => Some(format!("context {}: {err}", doc.id)),
        }
    })
    .into_iter()
    .flatten()
    .collect();
    manifest.stage("generate");

    manifest.incidents(failures.clone());
    let manifest_path =
        manifest_path.unwrap_or_else(|| default_manifest_path(cache_path, "pregen"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;

    if !failures.is_empty() {
        bail!(
            "pregen left {} of {} contexts unfilled; progress is preserved, rerun to resume",
            failures.len(),
            corpus.len()
        );
    }
    println!(
        "pregen complete: {} contexts, cache at {}",
        corpus.len(),
        cache_path.display()
    );
    Ok(())
}

pub struct RankInputs {
    pub corpus: BTreeMap<String, ContextDoc>,
    pub queries: BTreeMap<String, Query>,
    pub baseline: RankedRun,
}

pub fn load_rank_inputs(
    corpus_path: &Path,
    queries_path: &Path,
    run_path: &Path,
) -> anyhow::Result<RankInputs> {
    let corpus: BTreeMap<String, ContextDoc> = load_corpus(corpus_path)?
        .into_iter()
        .map(|d| (d.id.clone(), d))
        .collect();
    let queries: BTreeMap<String, Query> = load_queries(queries_path)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();
    let baseline = read_run(run_path)?;
    Ok(RankInputs {
        corpus,
        queries,
        baseline,
    })
}

/// Reranks every query of the baseline run. `downsample` overrides the
/// score config's own setting when given.
pub fn rerank_all(
    inputs: &RankInputs,
    runtime: &Runtime,
    cache: &QueryCache,
    tag: &str,
    lambda: Option<f64>,
    downsample: Option<DownsampleConfig>,
) -> anyhow::Result<(RankedRun, Vec<String>)> {
    let mut cfg = runtime.pipeline.clone();
    if let Some(lambda) = lambda {
        cfg.score.lambda = lambda;
    }
    if downsample.is_some() {
        cfg.score.downsample = downsample;
    }
    let deps = deps_for(runtime, cache);

    let query_ids: Vec<String> = inputs.baseline.query_ids().map(str::to_string).collect();
    let outcomes: Vec<anyhow::Result<(String, RankOutput)>> =
        parallel_map(&query_ids, cfg.concurrency, |query_id| {
            let query = inputs
                .queries
                .get(query_id)
                .ok_or_else(|| anyhow!("query {query_id:?} from baseline run missing from queries file"))?;
            let entries = inputs
                .baseline
                .ranking(query_id)
                .expect("query id comes from the run");
            let mut candidates = Vec::with_capacity(entries.len().min(cfg.retrieval_depth));
            for entry in entries.iter().take(cfg.retrieval_depth) {
                let doc = inputs.corpus.get(&entry.doc_id).ok_or_else(|| {
                    anyhow!("doc id {:?} from baseline run not present in corpus", entry.doc_id)
                })?;
                candidates.push((doc.clone(), entry.score));
            }
            let list = CandidateList::new(query.clone(), candidates)?;
            let output = match cfg.hyde {
                HydeMode::Off => rank(&list, &cfg, &deps)?,
                _ => compose_hyde(&list, &cfg, &deps)?,
            };
            Ok((query_id.clone(), output))
        });

    let mut run = RankedRun::new(tag);
    let mut incidents = Vec::new();
    for outcome in outcomes {
        let (query_id, output) = outcome?;
        incidents.extend(
            output
                .incidents
                .iter()
                .map(|i| format!("query {query_id}: {i}")),
        );
        run.set_from_scored(query_id, &output.ranking)?;
    }
    incidents.sort();
    Ok((run, incidents))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_rank(
    runtime: &Runtime,
    corpus_path: &Path,
    queries_path: &Path,
    baseline_path: &Path,
    cache_path: &Path,
    out_path: &Path,
    tag: &str,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new("rank", runtime.snapshot.clone());
    manifest
        .input("corpus", corpus_path)
        .input("queries", queries_path)
        .input("baseline_run", baseline_path)
        .input("cache", cache_path)
        .output("run", out_path);

    let inputs = load_rank_inputs(corpus_path, queries_path, baseline_path)?;
    let cache = QueryCache::open(cache_path)?;
    manifest.stage("load");

    let (run, incidents) = rerank_all(&inputs, runtime, &cache, tag, None, None)?;
    manifest.stage("rank");

    write_run(out_path, &run)?;
    manifest.stage("write");

    manifest.incidents(incidents);
    let manifest_path = manifest_path.unwrap_or_else(|| default_manifest_path(out_path, "rank"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;
    println!("ranked {} queries into {}", run.len(), out_path.display());
    Ok(())
}

pub fn cmd_eval(
    run_path: &Path,
    qrels_path: &Path,
    k: usize,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new("eval", json!({ "k": k }));
    manifest.input("run", run_path).input("qrels", qrels_path);

    let run = read_run(run_path)?;
    let qrels = load_qrels(qrels_path)?;
    manifest.stage("load");

    let report = evaluate(&run, &qrels, k)?;
    manifest.stage("evaluate");

    println!("query\tndcg@{k}");
    for (query_id, score) in &report.per_query {
        println!("{query_id}\t{score:.4}");
    }
    println!("mean\t{:.4}", report.mean);
    for query_id in &report.skipped {
        eprintln!("# skipped (no positive judgments): {query_id}");
    }

    manifest.results(serde_json::to_value(&report)?);
    let manifest_path = manifest_path.unwrap_or_else(|| default_manifest_path(run_path, "eval"));
    let counters = hyqe::providers::ProviderCounters::default();
    manifest.finish(&counters, None, &manifest_path)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sweep(
    runtime: &Runtime,
    corpus_path: &Path,
    queries_path: &Path,
    baseline_path: &Path,
    cache_path: &Path,
    qrels_path: &Path,
    lambdas: &[f64],
    k_eval: usize,
    tag: &str,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    if lambdas.is_empty() {
        bail!("sweep needs at least one lambda");
    }
    let mut manifest = ManifestBuilder::new("sweep", runtime.snapshot.clone());
    manifest
        .input("corpus", corpus_path)
        .input("queries", queries_path)
        .input("baseline_run", baseline_path)
        .input("cache", cache_path)
        .input("qrels", qrels_path);

    let inputs = load_rank_inputs(corpus_path, queries_path, baseline_path)?;
    let qrels = load_qrels(qrels_path)?;
    let cache = QueryCache::open(cache_path)?;
    manifest.stage("load");

    let mut rows = Vec::new();
    println!("lambda\tmean_ndcg@{k_eval}");
    for &lambda in lambdas {
        let (run, _) = rerank_all(&inputs, runtime, &cache, tag, Some(lambda), None)?;
        let report = evaluate(&run, &qrels, k_eval)?;
        println!("{lambda}\t{:.4}", report.mean);
        rows.push(json!({ "lambda": lambda, "mean_ndcg": report.mean }));
    }
    manifest.stage("sweep");

    manifest.results(json!(rows));
    let manifest_path = manifest_path.unwrap_or_else(|| default_manifest_path(cache_path, "sweep"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_downsample(
    runtime: &Runtime,
    corpus_path: &Path,
    queries_path: &Path,
    baseline_path: &Path,
    cache_path: &Path,
    qrels_path: &Path,
    ratios: &[f64],
    trials: usize,
    seed_base: u64,
    out_dir: &Path,
    k_eval: usize,
    tag: &str,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    if ratios.is_empty() {
        bail!("downsample needs at least one ratio");
    }
    if trials == 0 {
        bail!("downsample needs at least one trial");
    }
    let mut manifest = ManifestBuilder::new("downsample", runtime.snapshot.clone());
    manifest
        .input("corpus", corpus_path)
        .input("queries", queries_path)
        .input("baseline_run", baseline_path)
        .input("cache", cache_path)
        .input("qrels", qrels_path)
        .output("runs", out_dir);

    let inputs = load_rank_inputs(corpus_path, queries_path, baseline_path)?;
    let qrels = load_qrels(qrels_path)?;
    let cache = QueryCache::open(cache_path)?;
    std::fs::create_dir_all(out_dir)?;
    manifest.stage("load");

    let mut rows = Vec::new();
    println!("ratio\ttrials\tmean_ndcg@{k_eval}");
    for &ratio in ratios {
        let mut sum = 0.0;
        for trial in 0..trials {
            let seed = seed_base + trial as u64;
            let (run, _) = rerank_all(
                &inputs,
                runtime,
                &cache,
                tag,
                None,
                Some(DownsampleConfig { ratio, seed }),
            )?;
            let out_path = out_dir.join(format!("run-r{ratio}-t{trial}.trec"));
            write_run(&out_path, &run)?;
            let report = evaluate(&run, &qrels, k_eval)?;
            sum += report.mean;
        }
        let mean = sum / trials as f64;
        println!("{ratio}\t{trials}\t{mean:.4}");
        rows.push(json!({ "ratio": ratio, "trials": trials, "mean_ndcg": mean }));
    }
    manifest.stage("downsample");

    manifest.results(json!(rows));
    let manifest_path =
        manifest_path.unwrap_or_else(|| default_manifest_path(out_dir, "downsample"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;
    Ok(())
}

pub fn cmd_export_embeddings(
    runtime: &Runtime,
    corpus_path: &Path,
    queries_path: &Path,
    cache_path: &Path,
    out_path: &Path,
    manifest_path: Option<PathBuf>,
) -> anyhow::Result<()> {
    let mut manifest = ManifestBuilder::new("export-embeddings", runtime.snapshot.clone());
    manifest
        .input("corpus", corpus_path)
        .input("queries", queries_path)
        .input("cache", cache_path)
        .output("embeddings", out_path);

    let corpus = load_corpus(corpus_path)?;
    let queries = load_queries(queries_path)?;
    let cache = QueryCache::open(cache_path)?;
    manifest.stage("load");

    let fingerprint = hyqe::providers::GeneratorFingerprint::new(
        runtime.generator.model_name(),
        &runtime.template.template_id,
        &runtime.params,
        &runtime.wrapper,
    );

    let file = std::fs::File::create(out_path)
        .with_context(|| format!("creating {}", out_path.display()))?;
    let mut out = std::io::BufWriter::new(file);
    use hyqe::providers::Embedder;
    use std::io::Write;

    let mut rows = 0usize;
    for query in &queries {
        let embedding = &runtime.embedder.embed(std::slice::from_ref(&query.text))?[0];
        writeln!(
            out,
            "{}",
            json!({ "role": "query", "id": query.id, "text": query.text, "embedding": embedding })
        )?;
        rows += 1;
    }
    let mut missing_records = 0usize;
    for doc in &corpus {
        let rendered = doc.rendered_text();
        if !rendered.is_empty() {
            let embedding = &runtime.embedder.embed(std::slice::from_ref(&rendered))?[0];
            writeln!(
                out,
                "{}",
                json!({ "role": "context", "id": doc.id, "text": rendered, "embedding": embedding })
            )?;
            rows += 1;
        }
        let key = CacheKey::new(doc.id.clone(), fingerprint.clone());
        match cache.get(&key)? {
            Some(record) => {
                for (i, (query, embedding)) in
                    record.queries.iter().zip(&record.embeddings).enumerate()
                {
                    writeln!(
                        out,
                        "{}",
                        json!({
                            "role": "hypothetical_query",
                            "id": format!("{}#{}", doc.id, i),
                            "context_id": doc.id,
                            "text": query,
                            "embedding": embedding,
                        })
                    )?;
                    rows += 1;
                }
            }
            None => missing_records += 1,
        }
    }
    out.flush()?;
    manifest.stage("export");

    if missing_records > 0 {
        manifest.incidents([format!(
            "{missing_records} contexts had no cached hypothetical queries; run pregen first for full coverage"
        )]);
    }
    manifest.results(json!({ "rows": rows }));
    let manifest_path =
        manifest_path.unwrap_or_else(|| default_manifest_path(out_path, "export-embeddings"));
    manifest.finish(&runtime.counters, Some(cache.stats()), &manifest_path)?;
    println!("exported {rows} embedding rows to {}", out_path.display());
    Ok(())
}
