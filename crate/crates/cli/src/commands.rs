use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use annpipe::antihub;
use annpipe::dataset::{self, NeighborList};
use annpipe::index_file::{self, StoredSearch};
use annpipe::metrics::{self, BenchReport};
use annpipe::pipeline::{Pipeline, PipelineParams, StageOrder};
use annpipe::tuner::{self, EvalConfig, Mode, PipelineEvaluator, SearchSpace, TpeConfig, TrialRecord, Tuner};
use annpipe::SearchParams;
use serde::{Deserialize, Serialize};

use crate::config::{pick, require_path, FileConfig};
use crate::{BenchArgs, BuildArgs, CliError, GenerateArgs, PipelineFlags, ReportArgs, SearchArgs, SubsampleArgs, TuneArgs};

/// Ground-truth file layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub k: usize,
    pub neighbors: Vec<NeighborList>,
}

/// One row of the bench CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub dim: usize,
    pub points: usize,
    pub num_clusters: usize,
    pub pool_size: usize,
    pub k: usize,
    pub recall_at_k: f64,
    pub qps: f64,
    pub memory_bytes: u64,
    pub repeats: usize,
}

/// One row of the trial CSV written by `report`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrialRow {
    trial_index: usize,
    d: usize,
    alpha: f64,
    num_clusters: usize,
    recall: f64,
    qps: f64,
    memory_bytes: u64,
    feasible: bool,
    build_seconds: f64,
    pareto: bool,
}

#[derive(Debug, Serialize)]
struct TuneReport {
    mode: Mode,
    recall_threshold: f64,
    trials: usize,
    failed_trials: usize,
    resumed_from: usize,
    best: Option<TrialRecord>,
    pareto: Vec<TrialRecord>,
    wall_clock_seconds: f64,
    build_seconds_total: f64,
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::io(e.to_string()))?;
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
            }
            fs::write(p, text + "\n").map_err(|e| CliError::io(format!("{}: {e}", p.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::from(annpipe::Error::from(e)))
}

fn report_path(flag: Option<PathBuf>, cfg: &FileConfig, file_name: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        cfg.paths
            .report_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("."))
            .join(file_name)
    })
}

fn parse_order(s: &str) -> Result<StageOrder, CliError> {
    match s {
        "subsample_then_pca" => Ok(StageOrder::SubsampleThenPca),
        "pca_then_subsample" => Ok(StageOrder::PcaThenSubsample),
        other => Err(CliError::argument(format!(
            "unknown order `{other}` (expected subsample_then_pca or pca_then_subsample)"
        ))),
    }
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "constrained" => Ok(Mode::Constrained),
        "multi" => Ok(Mode::Multi),
        other => Err(CliError::argument(format!("unknown mode `{other}` (expected constrained or multi)"))),
    }
}

fn pipeline_params(flags: &PipelineFlags, cfg: &FileConfig) -> Result<PipelineParams, CliError> {
    let f = &cfg.pipeline;
    let def = PipelineParams::default();
    let order = match flags.order.as_deref().or(f.order.as_deref()) {
        Some(s) => parse_order(s)?,
        None => def.order,
    };
    Ok(PipelineParams {
        d: flags.d.or(f.d),
        alpha: pick(flags.alpha, f.alpha, def.alpha),
        num_clusters: pick(flags.num_clusters, f.num_clusters, def.num_clusters),
        max_degree: pick(flags.max_degree, f.max_degree, def.max_degree),
        build_pool: pick(flags.build_pool, f.build_pool, def.build_pool),
        pool_size: pick(flags.pool_size, f.pool_size, def.pool_size),
        k_hub: pick(flags.k_hub, f.k_hub, def.k_hub),
        k: pick(flags.k, f.k, def.k),
        kmeans_iters: pick(flags.kmeans_iters, f.kmeans_iters, def.kmeans_iters),
        seed: pick(flags.seed, f.seed, def.seed),
        order,
    })
}

pub fn generate(cfg: &FileConfig, a: GenerateArgs) -> Result<(), CliError> {
    let k = pick(a.k, cfg.pipeline.k, 10);
    let seed = pick(a.seed, cfg.pipeline.seed, 0);
    if k == 0 || k > a.n {
        return Err(CliError::argument(format!("k={k} must be in [1, n={}]", a.n)));
    }
    let out = a
        .out
        .or_else(|| cfg.paths.report_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let (base, queries) = dataset::generate_with_queries(a.n, a.queries, a.dim, a.blobs, a.anisotropy, seed)?;
    let neighbors = dataset::brute_force_knn(&base, &queries, k)?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    dataset::save_fvecs(&base, out.join("database.fvecs"))?;
    dataset::save_fvecs(&queries, out.join("queries.fvecs"))?;
    write_json(Some(&out.join("groundtruth.json")), &GroundTruth { k, neighbors })
}

pub fn subsample(cfg: &FileConfig, a: SubsampleArgs) -> Result<(), CliError> {
    let db = require_path(a.database, &cfg.paths.database, "database")?;
    let alpha = pick(a.alpha, cfg.pipeline.alpha, 1.0);
    let k_hub = pick(a.k_hub, cfg.pipeline.k_hub, antihub::DEFAULT_K_HUB);
    let base = dataset::load_fvecs(&db)?;
    let profile = antihub::k_occurrence(&base, k_hub)?;
    let kept = antihub::antihub_subsample(&base, &profile, alpha)?;
    dataset::save_fvecs(&kept, &a.out)?;
    if let Some(ids_out) = a.ids_out {
        let ids: Vec<u32> = (0..kept.count()).map(|i| kept.original_id(i)).collect();
        write_json(Some(&ids_out), &ids)?;
    }
    Ok(())
}

pub fn build(cfg: &FileConfig, a: BuildArgs) -> Result<(), CliError> {
    let db = require_path(a.database, &cfg.paths.database, "database")?;
    let index_path = require_path(a.index, &cfg.paths.index, "index")?;
    let params = pipeline_params(&a.pipeline, cfg)?;
    let base = dataset::load_fvecs(&db)?;
    let (pipeline, timings) = Pipeline::build(&base, &params, None)?;
    index_file::save(
        &pipeline,
        StoredSearch {
            k: params.k,
            pool_size: params.pool_size,
        },
        &index_path,
    )?;
    write_json(
        None,
        &serde_json::json!({
            "index": index_path,
            "points": pipeline.index.len(),
            "dim": pipeline.index.base().dim(),
            "timings": timings,
            "memory_bytes": pipeline.memory_bytes(),
        }),
    )
}

fn load_index(flag: Option<PathBuf>, cfg: &FileConfig) -> Result<(Pipeline, StoredSearch), CliError> {
    let path = require_path(flag, &cfg.paths.index, "index")?;
    Ok(index_file::load(path)?)
}

fn search_params(k: Option<usize>, pool: Option<usize>, cfg: &FileConfig, stored: StoredSearch) -> SearchParams {
    SearchParams::new(
        pick(k, cfg.pipeline.k, stored.k),
        pick(pool, cfg.pipeline.pool_size, stored.pool_size),
    )
}

pub fn search(cfg: &FileConfig, a: SearchArgs) -> Result<(), CliError> {
    let (pipeline, stored) = load_index(a.index, cfg)?;
    let queries = dataset::load_fvecs(require_path(a.queries, &cfg.paths.queries, "queries")?)?;
    let params = search_params(a.k, a.pool_size, cfg, stored);
    let results = pipeline.search(&queries, &params)?;
    write_json(a.out.as_deref(), &results)
}

pub fn bench(cfg: &FileConfig, a: BenchArgs) -> Result<(), CliError> {
    let (pipeline, stored) = load_index(a.index, cfg)?;
    let queries = dataset::load_fvecs(require_path(a.queries, &cfg.paths.queries, "queries")?)?;
    let gt: GroundTruth = read_json(&require_path(a.ground_truth, &cfg.paths.ground_truth, "ground-truth")?)?;
    let params = search_params(a.k, a.pool_size, cfg, stored);
    let repeats = pick(a.repeats, cfg.pipeline.repeats, metrics::DEFAULT_REPEATS);
    let results = pipeline.search(&queries, &params)?;
    let recall = metrics::recall_at_k(&gt.neighbors, &results, params.k)?;
    let qps = metrics::measure_qps(|q| pipeline.search(q, &params), &queries, repeats)?;
    let report = BenchReport {
        recall_at_k: recall,
        qps,
        memory_bytes: pipeline.memory_bytes(),
        repeats,
        k: params.k,
    };
    write_json(Some(&report_path(a.report, cfg, "bench.json")), &report)?;

    let csv_path = report_path(a.csv, cfg, "bench.csv");
    let fresh = !csv_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| CliError::io(format!("{}: {e}", csv_path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    let row = BenchRow {
        label: a.label.unwrap_or_default(),
        dim: pipeline.index.base().dim(),
        points: pipeline.index.len(),
        num_clusters: pipeline.selector.as_ref().map_or(0, |s| s.num_clusters()),
        pool_size: params.pool_size,
        k: params.k,
        recall_at_k: report.recall_at_k,
        qps: report.qps,
        memory_bytes: report.memory_bytes,
        repeats,
    };
    w.serialize(&row).map_err(|e| CliError::io(e.to_string()))?;
    w.flush().map_err(|e| CliError::io(e.to_string()))
}

pub fn tune(cfg: &FileConfig, a: TuneArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let t = &cfg.tuning;
    let base = dataset::load_fvecs(require_path(a.database, &cfg.paths.database, "database")?)?;
    let queries = dataset::load_fvecs(require_path(a.queries, &cfg.paths.queries, "queries")?)?;
    let gt: GroundTruth = read_json(&require_path(a.ground_truth, &cfg.paths.ground_truth, "ground-truth")?)?;

    let mode = parse_mode(a.mode.as_deref().or(t.mode.as_deref()).unwrap_or("constrained"))?;
    let budget = pick(a.budget, t.budget, 30);
    let defaults = SearchSpace::default_for(base.dim());
    let space = SearchSpace {
        d: (
            pick(a.d_min, t.d_min, defaults.d.0),
            pick(a.d_max, t.d_max, defaults.d.1),
        ),
        alpha: (
            pick(a.alpha_min, t.alpha_min, defaults.alpha.0),
            pick(a.alpha_max, t.alpha_max, defaults.alpha.1),
        ),
        num_clusters: (
            pick(a.clusters_min, t.clusters_min, defaults.num_clusters.0),
            pick(a.clusters_max, t.clusters_max, defaults.num_clusters.1),
        ),
    };
    let params = pipeline_params(&a.pipeline, cfg)?;
    let tpe_defaults = TpeConfig::default();
    let tpe = TpeConfig {
        gamma: t.gamma.unwrap_or(tpe_defaults.gamma),
        startup_trials: t.startup_trials.unwrap_or(tpe_defaults.startup_trials),
        candidates_per_suggest: t.candidates.unwrap_or(tpe_defaults.candidates_per_suggest),
        bandwidth_floor: tpe_defaults.bandwidth_floor,
        recall_threshold: pick(a.recall_threshold, t.recall_threshold, tpe_defaults.recall_threshold),
        seed: params.seed,
    };
    let eval = EvalConfig {
        max_degree: params.max_degree,
        build_pool: params.build_pool,
        pool_size: params.pool_size,
        k_hub: params.k_hub,
        k: params.k,
        repeats: pick(a.repeats, cfg.pipeline.repeats, metrics::DEFAULT_REPEATS),
        kmeans_iters: params.kmeans_iters,
        seed: params.seed,
        order: params.order,
    };
    if gt.k < eval.k {
        return Err(CliError::argument(format!("ground truth has k={} but k={} requested", gt.k, eval.k)));
    }

    let history_path = report_path(a.history, cfg, "history.jsonl");
    if let Some(dir) = history_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    }
    let history = tuner::read_history(&history_path)?;
    let resumed_from = history.len();
    let mut evaluator = PipelineEvaluator::new(&base, &queries, &gt.neighbors, eval);
    let mut run = Tuner::new(space, tpe.clone(), mode)?.with_history(history);
    run.run(budget, &mut evaluator, |r| tuner::append_history(&history_path, r))?;

    let history = run.state.history;
    let report = TuneReport {
        mode,
        recall_threshold: tpe.recall_threshold,
        trials: history.len(),
        failed_trials: history.iter().filter(|r| r.failed()).count(),
        resumed_from,
        best: tuner::best_constrained(&history),
        pareto: tuner::pareto_front(&history),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        build_seconds_total: history.iter().map(|r| r.build_seconds).sum(),
    };
    write_json(Some(&report_path(a.report, cfg, "tune.json")), &report)
}

pub fn report(cfg: &FileConfig, a: ReportArgs) -> Result<(), CliError> {
    if let Some(csv_path) = a.bench_csv {
        let mut r = csv::Reader::from_path(&csv_path).map_err(|e| CliError::io(format!("{}: {e}", csv_path.display())))?;
        let rows = r
            .deserialize()
            .collect::<Result<Vec<BenchRow>, _>>()
            .map_err(|e| CliError::argument(format!("{}: {e}", csv_path.display())))?;
        return write_json(a.out.as_deref(), &serde_json::json!({ "rows": rows }));
    }
    let history_path = a
        .history
        .ok_or_else(|| CliError::argument("report needs --history or --bench-csv"))?;
    if !history_path.exists() {
        return Err(CliError::io(format!("{}: no such file", history_path.display())));
    }
    let history = tuner::read_history(&history_path)?;
    let threshold = pick(a.recall_threshold, cfg.tuning.recall_threshold, 0.9);
    let history: Vec<TrialRecord> = history
        .into_iter()
        .map(|mut r| {
            r.feasible = !r.failed() && r.recall >= threshold;
            r
        })
        .collect();
    let pareto = tuner::pareto_front(&history);
    if let Some(csv_path) = a.csv {
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::io(format!("{}: {e}", csv_path.display())))?;
        for r in &history {
            w.serialize(TrialRow {
                trial_index: r.trial_index,
                d: r.params.d,
                alpha: r.params.alpha,
                num_clusters: r.params.num_clusters,
                recall: r.recall,
                qps: r.qps,
                memory_bytes: r.memory_bytes,
                feasible: r.feasible,
                build_seconds: r.build_seconds,
                pareto: pareto.iter().any(|p| p.trial_index == r.trial_index),
            })
            .map_err(|e| CliError::io(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(e.to_string()))?;
    }
    write_json(
        a.out.as_deref(),
        &serde_json::json!({
            "recall_threshold": threshold,
            "trials": history.len(),
            "best": tuner::best_constrained(&history),
            "pareto": pareto,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use annpipe::VectorSet;

    #[test]
    fn flags_override_file_values() {
        let cfg: FileConfig = toml::from_str("[pipeline]\nalpha = 0.7\nmax_degree = 12\n").unwrap();
        let flags = PipelineFlags {
            max_degree: Some(20),
            ..Default::default()
        };
        let p = pipeline_params(&flags, &cfg).unwrap();
        assert_eq!(p.alpha, 0.7);
        assert_eq!(p.max_degree, 20);
        assert_eq!(p.k, 10);
    }

    #[test]
    fn unknown_keys_and_modes_rejected() {
        assert!(toml::from_str::<FileConfig>("[pipeline]\nalpah = 0.7\n").is_err());
        assert!(parse_mode("pareto").is_err());
        assert!(parse_order("pca_first").is_err());
    }

    #[test]
    fn ground_truth_loads() {
        let base = VectorSet::new(1, vec![0.0, 1.0, 3.0]).unwrap();
        let q = VectorSet::new(1, vec![0.9]).unwrap();
        let gt = GroundTruth {
            k: 2,
            neighbors: dataset::brute_force_knn(&base, &q, 2).unwrap(),
        };
        let back: GroundTruth = serde_json::from_str(&serde_json::to_string(&gt).unwrap()).unwrap();
        assert_eq!(back.neighbors, gt.neighbors);
    }
}
