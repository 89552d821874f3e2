//! Command-line driver: pregenerate hypothetical queries, rerank runs,
//! evaluate, sweep parameters, and serve reranking over HTTP.

mod commands;
mod config;
mod manifest;
mod serve;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use config::{build_runtime, FileConfig, PipelineFlags};

#[derive(Parser)]
#[command(
    name = "hyqe",
    about = "Hypothetical-query context re-ranking: pregenerate, rerank, evaluate, serve",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache hypothetical queries for every corpus context
    Pregen {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Rerank a baseline run and write the result as a new run file
    Rank {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        baseline_run: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run tag written to the output file
        #[arg(long, default_value = "hyqe")]
        tag: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Score a run against qrels with graded-relevance NDCG@k
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rerank under several lambda values and tabulate mean NDCG@k
    Sweep {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        baseline_run: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Comma-separated lambda values, e.g. 0,0.5,1
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        k_eval: usize,
        #[arg(long, default_value = "hyqe")]
        tag: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Rerank with randomly thinned hypothetical-query sets, averaged over
    /// several seeded trials per ratio
    Downsample {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        baseline_run: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Comma-separated keep ratios in (0, 1], e.g. 0.1,0.5
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed_base: u64,
        /// Directory for the per-trial run files
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        k_eval: usize,
        #[arg(long, default_value = "hyqe")]
        tag: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Write query, context, and hypothetical-query embeddings as JSONL
    /// with role labels, for external analysis
    ExportEmbeddings {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
    /// Serve POST /rerank over HTTP, sharing the batch code path and cache
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long, default_value_t = 4)]
        handler_threads: usize,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        flags: PipelineFlags,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pregen {
            corpus,
            cache,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            commands::cmd_pregen(&runtime, &corpus, &cache, manifest)
        }
        Command::Rank {
            corpus,
            queries,
            baseline_run,
            cache,
            out,
            tag,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            commands::cmd_rank(
                &runtime,
                &corpus,
                &queries,
                &baseline_run,
                &cache,
                &out,
                &tag,
                manifest,
            )
        }
        Command::Eval {
            run,
            qrels,
            k,
            manifest,
        } => commands::cmd_eval(&run, &qrels, k, manifest),
        Command::Sweep {
            corpus,
            queries,
            baseline_run,
            cache,
            qrels,
            lambdas,
            k_eval,
            tag,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            commands::cmd_sweep(
                &runtime,
                &corpus,
                &queries,
                &baseline_run,
                &cache,
                &qrels,
                &lambdas,
                k_eval,
                &tag,
                manifest,
            )
        }
        Command::Downsample {
            corpus,
            queries,
            baseline_run,
            cache,
            qrels,
            ratios,
            trials,
            seed_base,
            out_dir,
            k_eval,
            tag,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            commands::cmd_downsample(
                &runtime,
                &corpus,
                &queries,
                &baseline_run,
                &cache,
                &qrels,
                &ratios,
                trials,
                seed_base,
                &out_dir,
                k_eval,
                &tag,
                manifest,
            )
        }
        Command::ExportEmbeddings {
            corpus,
            queries,
            cache,
            out,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            commands::cmd_export_embeddings(&runtime, &corpus, &queries, &cache, &out, manifest)
        }
        Command::Serve {
            bind,
            cache,
            handler_threads,
            manifest,
            flags,
        } => {
            let file = FileConfig::load(flags.config.as_deref())?;
            let runtime = build_runtime(&file, &flags)?;
            serve::cmd_serve(&runtime, &bind, &cache, manifest, handler_threads)
        }
    }
}

fn main() {
    if let Err(err) = run() {
        // one machine-readable error line on stderr
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}
