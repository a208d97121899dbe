//! `annpipe` command-line tool.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "annpipe", version, about = "Graph ANN index with PCA, antihub subsampling and tuned entry points")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic database, queries and exact ground truth.
    Generate(GenerateArgs),
    /// Keep the least hub-like fraction of a database.
    Subsample(SubsampleArgs),
    /// Build an index file.
    Build(BuildArgs),
    /// Search an index file.
    Search(SearchArgs),
    /// Measure recall, QPS and memory of an index file.
    Bench(BenchArgs),
    /// Tune d, alpha and the number of clusters.
    Tune(TuneArgs),
    /// Summarize a trial history or a bench CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub dim: usize,
    #[arg(long)]
    pub queries: usize,
    #[arg(long, default_value_t = 8)]
    pub blobs: usize,
    #[arg(long, default_value_t = 0.9)]
    pub anisotropy: f64,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: paths.report_dir, else ".").
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub k_hub: Option<usize>,
    /// Output fvecs file.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON file receiving the kept original ids.
    #[arg(long)]
    pub ids_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct PipelineFlags {
    /// PCA target dimension (default: no reduction).
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub num_clusters: Option<usize>,
    #[arg(long)]
    pub max_degree: Option<usize>,
    #[arg(long)]
    pub build_pool: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub k_hub: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub kmeans_iters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// subsample_then_pca or pca_then_subsample.
    #[arg(long)]
    pub order: Option<String>,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Output JSON (list of {ids, distances}); stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Free-form label for the CSV row.
    #[arg(long)]
    pub label: Option<String>,
    /// Report JSON (default: <report_dir>/bench.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV to append a row to (default: <report_dir>/bench.csv).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// constrained or multi.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub recall_threshold: Option<f64>,
    #[arg(long)]
    pub d_min: Option<usize>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub alpha_min: Option<f64>,
    #[arg(long)]
    pub alpha_max: Option<f64>,
    #[arg(long)]
    pub clusters_min: Option<usize>,
    #[arg(long)]
    pub clusters_max: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// History JSONL (default: <report_dir>/history.jsonl); resumed if present.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Report JSON (default: <report_dir>/tune.json).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Trial history JSONL.
    #[arg(long, conflicts_with = "bench_csv")]
    pub history: Option<PathBuf>,
    /// Bench CSV written by `bench`.
    #[arg(long)]
    pub bench_csv: Option<PathBuf>,
    #[arg(long)]
    pub recall_threshold: Option<f64>,
    /// Output JSON; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of (trial, d, alpha, clusters, recall, qps) rows for plotting.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    kind: &'static str,
    message: String,
    code: u8,
}

impl CliError {
    pub fn argument(message: impl Into<String>) -> Self {
        Self {
            kind: "argument",
            message: message.into(),
            code: 2,
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            kind: "io",
            message: message.into(),
            code: 3,
        }
    }
}

impl From<annpipe::Error> for CliError {
    fn from(e: annpipe::Error) -> Self {
        let (kind, code) = match &e {
            annpipe::Error::Argument(_) => ("argument", 2),
            annpipe::Error::Io { .. } => ("io", 3),
            annpipe::Error::FormatAtOffset { .. }
            | annpipe::Error::FormatAtRecord { .. }
            | annpipe::Error::Section { .. }
            | annpipe::Error::Json(_) => ("format", 4),
        };
        Self {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = serde_json::json!({ "error": { "kind": self.kind, "message": self.message } });
        write!(f, "{body}")
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::argument("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::argument(e.to_string()))?;
    }
    let cfg = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => commands::generate(&cfg, a),
        Command::Subsample(a) => commands::subsample(&cfg, a),
        Command::Build(a) => commands::build(&cfg, a),
        Command::Search(a) => commands::search(&cfg, a),
        Command::Bench(a) => commands::bench(&cfg, a),
        Command::Tune(a) => commands::tune(&cfg, a),
        Command::Report(a) => commands::report(&cfg, a),
    }
}
