//! Command-line behavior: exit codes, error reporting, manifests, and the
//! cache-keying consequences of configuration changes.

use std::path::{Path, PathBuf};
use std::process::Command;

fn fixture(path: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(path)
}

fn hyqe_command() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyqe"))
}

fn run_ok(command: &mut Command) -> String {
    let output = command.output().expect("spawn hyqe");
    assert!(
        output.status.success(),
        "command failed: {:?}\nstderr: {}",
        command,
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn pregen_small(cache: &Path) {
    run_ok(hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--cache").arg(cache)
        .arg("--config").arg(fixture("small/config.toml")));
}

#[test]
fn failure_exits_nonzero_with_machine_readable_error_line() {
    let output = hyqe_command()
        .arg("eval")
        .arg("--run").arg("/nonexistent/run.trec")
        .arg("--qrels").arg("/nonexistent/qrels.txt")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().expect("an error line");
    let parsed: serde_json::Value = serde_json::from_str(line).expect("stderr line is json");
    assert!(parsed["error"].as_str().unwrap().contains("No such file"));
}

#[test]
fn pregen_rerun_is_all_hits_and_template_change_regenerates() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let rerun_manifest = dir.path().join("rerun.json");
    run_ok(hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--cache").arg(&cache)
        .arg("--manifest").arg(&rerun_manifest)
        .arg("--config").arg(fixture("small/config.toml")));
    let rerun = manifest(&rerun_manifest);
    assert_eq!(rerun["provider_calls"]["generate_calls"], 0);
    assert_eq!(rerun["cache"]["hits"], 10);
    assert_eq!(rerun["cache"]["misses"], 0);
    assert_eq!(rerun["cache"]["records"], 10);

    // a different prompt template is a different fingerprint: 10 new records
    let argument_manifest = dir.path().join("argument.json");
    run_ok(hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--cache").arg(&cache)
        .arg("--template").arg("argument")
        .arg("--manifest").arg(&argument_manifest)
        .arg("--config").arg(fixture("small/config.toml")));
    let argument = manifest(&argument_manifest);
    assert_eq!(argument["provider_calls"]["generate_calls"], 10);
    assert_eq!(argument["cache"]["misses"], 10);
    assert_eq!(argument["cache"]["records"], 20);
}

#[test]
fn rank_at_lambda_zero_reproduces_baseline_head_order() {
    // the distractor fixture's baseline run is the embedder's cosine
    // ranking by construction, which is what a zero-weight rerank recovers
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    run_ok(hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(fixture("distractor/corpus.jsonl"))
        .arg("--cache").arg(&cache)
        .arg("--config").arg(fixture("distractor/config.toml")));

    let out = dir.path().join("out.trec");
    run_ok(hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("distractor/corpus.jsonl"))
        .arg("--queries").arg(fixture("distractor/queries.jsonl"))
        .arg("--baseline-run").arg(fixture("distractor/baseline.trec"))
        .arg("--cache").arg(&cache)
        .arg("--out").arg(&out)
        .arg("--lambda").arg("0")
        .arg("--config").arg(fixture("distractor/config.toml")));

    let baseline = std::fs::read_to_string(fixture("distractor/baseline.trec")).unwrap();
    let reranked = std::fs::read_to_string(&out).unwrap();
    let order = |text: &str| -> Vec<(String, String)> {
        text.lines()
            .map(|l| {
                let cols: Vec<&str> = l.split_whitespace().collect();
                (cols[0].to_string(), cols[2].to_string())
            })
            .collect()
    };
    assert_eq!(order(&baseline), order(&reranked));
}

#[test]
fn rank_rejects_doc_ids_missing_from_corpus() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let bad_run = dir.path().join("bad.trec");
    std::fs::write(&bad_run, "q01 Q0 ghost-doc 1 0.9 baseline\n").unwrap();
    let output = hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--baseline-run").arg(&bad_run)
        .arg("--cache").arg(&cache)
        .arg("--out").arg(dir.path().join("out.trec"))
        .arg("--config").arg(fixture("small/config.toml"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("ghost-doc"), "error must name the id: {stderr}");
}

#[test]
fn rank_is_deterministic_across_processes() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let rank_to = |out: &Path| {
        run_ok(hyqe_command()
            .arg("rank")
            .arg("--corpus").arg(fixture("small/corpus.jsonl"))
            .arg("--queries").arg(fixture("small/queries.jsonl"))
            .arg("--baseline-run").arg(fixture("small/baseline.trec"))
            .arg("--cache").arg(&cache)
            .arg("--out").arg(out)
            .arg("--config").arg(fixture("small/config.toml")));
    };
    let first = dir.path().join("a.trec");
    let second = dir.path().join("b.trec");
    rank_to(&first);
    rank_to(&second);
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn cached_query_sets_stay_small_on_the_fixture_corpus() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let mut records = 0usize;
    for entry in std::fs::read_dir(cache.join("records")).unwrap() {
        let path = entry.unwrap().path();
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let queries = record["queries"].as_array().unwrap();
        assert!(
            queries.len() <= 50,
            "query set of {} exceeds the expected bound",
            queries.len()
        );
        records += 1;
    }
    assert_eq!(records, 10);
}

#[test]
fn hyde_times_mode_spends_generator_calls_per_query() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let off_manifest_path = dir.path().join("off.json");
    run_ok(hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--baseline-run").arg(fixture("small/baseline.trec"))
        .arg("--cache").arg(&cache)
        .arg("--out").arg(dir.path().join("off.trec"))
        .arg("--manifest").arg(&off_manifest_path)
        .arg("--config").arg(fixture("small/config.toml")));
    let off = manifest(&off_manifest_path);
    assert_eq!(off["provider_calls"]["generate_calls"], 0);

    let times_manifest_path = dir.path().join("times.json");
    run_ok(hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--baseline-run").arg(fixture("small/baseline.trec"))
        .arg("--cache").arg(&cache)
        .arg("--out").arg(dir.path().join("times.trec"))
        .arg("--hyde").arg("times")
        .arg("--hyde-n-contexts").arg("2")
        .arg("--manifest").arg(&times_manifest_path)
        .arg("--config").arg(fixture("small/config.toml")));
    let times = manifest(&times_manifest_path);
    // 20 queries x 2 hypothetical contexts, none touching the context cache
    assert_eq!(times["provider_calls"]["generate_calls"], 40);
    assert_eq!(times["cache"]["misses"], 0);
}

#[test]
fn eval_reports_four_decimals_and_skips_unjudged_queries() {
    let dir = tempfile::TempDir::new().unwrap();
    let run = dir.path().join("run.trec");
    std::fs::write(&run, "q1 Q0 d1 1 0.9 t\nq1 Q0 d2 2 0.5 t\nqz Q0 d9 1 0.1 t\n").unwrap();
    let qrels = dir.path().join("qrels.txt");
    std::fs::write(&qrels, "q1 0 d2 1\nqz 0 d9 0\n").unwrap();

    let output = hyqe_command()
        .arg("eval")
        .arg("--run").arg(&run)
        .arg("--qrels").arg(&qrels)
        .arg("--k").arg("10")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    // d2 (the only relevant doc) sits at rank 2: ndcg = 1/log2(3)
    assert!(stdout.contains("q1\t0.6309"), "stdout: {stdout}");
    assert!(stdout.contains("mean\t0.6309"), "stdout: {stdout}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("qz"), "skipped query must be reported: {stderr}");
}

#[test]
fn export_writes_all_three_roles() {
    let dir = tempfile::TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    pregen_small(&cache);

    let out = dir.path().join("embeddings.jsonl");
    run_ok(hyqe_command()
        .arg("export-embeddings")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--cache").arg(&cache)
        .arg("--out").arg(&out)
        .arg("--config").arg(fixture("small/config.toml")));

    let text = std::fs::read_to_string(&out).unwrap();
    let mut roles = std::collections::BTreeMap::new();
    for line in text.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        *roles.entry(row["role"].as_str().unwrap().to_string()).or_insert(0usize) += 1;
        assert!(row["embedding"].as_array().unwrap().len() == 8);
    }
    assert_eq!(roles["query"], 20);
    assert_eq!(roles["context"], 10);
    assert_eq!(roles["hypothetical_query"], 40);
}

#[test]
fn pregen_preserves_partial_progress_and_resumes() {
    let dir = tempfile::TempDir::new().unwrap();
    // fixture embedder with no fallback: contexts whose derived questions
    // are not in the table fail to embed, the rest succeed
    let embeddings = dir.path().join("embeddings.json");
    let mut table = serde_json::Map::new();
    for (text, v) in [
        ("good passage", vec![1.0, 0.0]),
        ("What is good?", vec![0.9, 0.1]),
        ("What is passage?", vec![0.8, 0.2]),
    ] {
        table.insert(text.to_string(), serde_json::json!(v));
    }
    std::fs::write(&embeddings, serde_json::to_string(&table).unwrap()).unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[provider]\nkind = \"mock\"\nmock_embeddings = \"embeddings.json\"\n\n[generation]\nmax_output_tokens = 64\n",
    )
    .unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    std::fs::write(
        &corpus,
        "{\"_id\":\"ok\",\"text\":\"good passage\"}\n{\"_id\":\"broken\",\"text\":\"unknown words here\"}\n",
    )
    .unwrap();

    let cache = dir.path().join("cache");
    let first_manifest = dir.path().join("first.json");
    let output = hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(&corpus)
        .arg("--cache").arg(&cache)
        .arg("--manifest").arg(&first_manifest)
        .arg("--config").arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success(), "partial failure must exit nonzero");
    let first = manifest(&first_manifest);
    assert_eq!(first["cache"]["records"], 1, "the good context is preserved");
    assert_eq!(first["incidents"].as_array().unwrap().len(), 1);

    // resume: the preserved record is a hit, only the broken one retries
    let second_manifest = dir.path().join("second.json");
    let output = hyqe_command()
        .arg("pregen")
        .arg("--corpus").arg(&corpus)
        .arg("--cache").arg(&cache)
        .arg("--manifest").arg(&second_manifest)
        .arg("--config").arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let second = manifest(&second_manifest);
    assert_eq!(second["cache"]["hits"], 1);
    assert_eq!(second["cache"]["records"], 1);
}

#[test]
fn strict_mode_fails_fast_when_provider_is_unusable() {
    let dir = tempfile::TempDir::new().unwrap();
    // a window too small for any prompt forces generation failures
    let config = dir.path().join("strict.toml");
    std::fs::write(
        &config,
        "[provider]\nkind = \"mock\"\nmock_dim = 8\nwindow_tokens = 10\n\n[generation]\nmax_output_tokens = 64\n",
    )
    .unwrap();

    let output = hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--baseline-run").arg(fixture("small/baseline.trec"))
        .arg("--cache").arg(dir.path().join("cache"))
        .arg("--out").arg(dir.path().join("out.trec"))
        .arg("--strict")
        .arg("--config").arg(&config)
        .output()
        .unwrap();
    assert!(!output.status.success());

    // without strict, the same run completes with incidents in the manifest
    let lax_manifest_path = dir.path().join("lax.json");
    run_ok(hyqe_command()
        .arg("rank")
        .arg("--corpus").arg(fixture("small/corpus.jsonl"))
        .arg("--queries").arg(fixture("small/queries.jsonl"))
        .arg("--baseline-run").arg(fixture("small/baseline.trec"))
        .arg("--cache").arg(dir.path().join("cache2"))
        .arg("--out").arg(dir.path().join("out2.trec"))
        .arg("--manifest").arg(&lax_manifest_path)
        .arg("--config").arg(&config));
    let lax = manifest(&lax_manifest_path);
    assert!(!lax["incidents"].as_array().unwrap().is_empty());
}
