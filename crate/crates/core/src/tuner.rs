//! Black-box tuning of the PCA dimension, the subsampling ratio and the
//! number of entry-point clusters.
//!
//! Two modes share one TPE sampler:
//!
//! * constrained: maximize QPS subject to `recall >= threshold`; infeasible
//!   trials never enter the "good" group,
//! * multi-objective: maximize recall and QPS; the good group is filled by
//!   non-domination rank and the result is the Pareto front.

use std::fs::{self, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::antihub::{self, HubnessProfile};
use crate::dataset::{NeighborList, VectorSet};
use crate::error::{Error, Result};
use crate::metrics::{measure_qps, recall_at_k};
use crate::pipeline::{Pipeline, PipelineParams, StageOrder};

/// One point of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub d: usize,
    pub alpha: f64,
    pub num_clusters: usize,
}

/// Inclusive bounds of every tuned parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub d: (usize, usize),
    pub alpha: (f64, f64),
    pub num_clusters: (usize, usize),
}

impl SearchSpace {
    /// `d ∈ [d0/8, d0]`, `alpha ∈ [0.5, 1]`, `num_clusters ∈ [1, 64]`.
    pub fn default_for(d0: usize) -> Self {
        Self {
            d: ((d0 / 8).max(1), d0),
            alpha: (0.5, 1.0),
            num_clusters: (1, 64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d.0 >= 1
            && self.d.0 <= self.d.1
            && self.alpha.0 > 0.0
            && self.alpha.0 <= self.alpha.1
            && self.alpha.1 <= 1.0
            && self.num_clusters.0 >= 1
            && self.num_clusters.0 <= self.num_clusters.1;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("empty or invalid search space {self:?}")))
        }
    }

    pub fn contains(&self, p: &TrialParams) -> bool {
        (self.d.0..=self.d.1).contains(&p.d)
            && p.alpha >= self.alpha.0
            && p.alpha <= self.alpha.1
            && (self.num_clusters.0..=self.num_clusters.1).contains(&p.num_clusters)
    }

    fn dims(&self) -> [Dim; 3] {
        [
            Dim::int(self.d.0, self.d.1),
            Dim::float(self.alpha.0, self.alpha.1),
            Dim::int(self.num_clusters.0, self.num_clusters.1),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Dim {
    low: f64,
    high: f64,
    integer: bool,
}

impl Dim {
    fn int(low: usize, high: usize) -> Self {
        Self {
            low: low as f64,
            high: high as f64,
            integer: true,
        }
    }
    fn float(low: f64, high: f64) -> Self {
        Self {
            low,
            high,
            integer: false,
        }
    }
    fn range(&self) -> f64 {
        self.high - self.low
    }
    fn snap(&self, x: f64) -> f64 {
        let x = x.clamp(self.low, self.high);
        if self.integer {
            x.round().clamp(self.low, self.high)
        } else {
            x
        }
    }
}

fn to_vector(p: &TrialParams) -> [f64; 3] {
    [p.d as f64, p.alpha, p.num_clusters as f64]
}

fn from_vector(x: [f64; 3]) -> TrialParams {
    TrialParams {
        d: x[0] as usize,
        alpha: x[1],
        num_clusters: x[2] as usize,
    }
}

/// What one evaluation measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub recall: f64,
    pub qps: f64,
    pub memory_bytes: u64,
    pub build_seconds: f64,
}

/// One tuner evaluation, as persisted in the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub params: TrialParams,
    pub recall: f64,
    pub qps: f64,
    pub memory_bytes: u64,
    pub feasible: bool,
    pub build_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn from_outcome(
        trial_index: usize,
        params: TrialParams,
        outcome: Result<Measurement>,
        recall_threshold: f64,
    ) -> Self {
        match outcome {
            Ok(m) => Self {
                trial_index,
                params,
                recall: m.recall,
                qps: m.qps,
                memory_bytes: m.memory_bytes,
                feasible: m.recall >= recall_threshold,
                build_seconds: m.build_seconds,
                error: None,
            },
            Err(e) => Self {
                trial_index,
                params,
                recall: 0.0,
                qps: 0.0,
                memory_bytes: 0,
                feasible: false,
                build_seconds: 0.0,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Anything that can score a parameter point.
pub trait Evaluator {
    fn evaluate(&mut self, params: &TrialParams) -> Result<Measurement>;
}

impl<F> Evaluator for F
where
    F: FnMut(&TrialParams) -> Result<Measurement>,
{
    fn evaluate(&mut self, params: &TrialParams) -> Result<Measurement> {
        self(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Constrained,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    pub gamma: f64,
    pub startup_trials: usize,
    pub candidates_per_suggest: usize,
    /// Minimum kernel width as a fraction of each dimension's range.
    pub bandwidth_floor: f64,
    pub recall_threshold: f64,
    pub seed: u64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            startup_trials: 10,
            candidates_per_suggest: 24,
            bandwidth_floor: 0.01,
            recall_threshold: 0.9,
            seed: 0,
        }
    }
}

/// Sampler state: the history so far plus its configuration.
#[derive(Debug, Clone)]
pub struct TpeState {
    pub history: Vec<TrialRecord>,
    pub config: TpeConfig,
    pub mode: Mode,
}

impl TpeState {
    pub fn new(config: TpeConfig, mode: Mode) -> Self {
        Self {
            history: Vec::new(),
            config,
            mode,
        }
    }
}

/// `max(1, ⌈gamma · n⌉)`.
pub fn good_group_size(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64).ceil() as usize).max(1)
}

/// Splits the history into (good, bad) for the density models.
///
/// Constrained mode orders feasible trials by QPS (descending) and takes up
/// to `good_group_size` of them; infeasible and failed trials always land in
/// the bad group. While no trial is feasible the good group is the trials
/// with the highest recall instead, pulling the search toward feasibility.
///
/// Multi-objective mode orders by non-domination rank in (recall, QPS),
/// breaking ties inside a rank by the sum of range-normalized objectives.
pub fn split_history(
    history: &[TrialRecord],
    mode: Mode,
    gamma: f64,
) -> (Vec<&TrialRecord>, Vec<&TrialRecord>) {
    let n_good = good_group_size(history.len(), gamma);
    let (ok, failed): (Vec<&TrialRecord>, Vec<&TrialRecord>) = history.iter().partition(|r| !r.failed());
    let mut ordered: Vec<&TrialRecord>;
    let n_good = match mode {
        Mode::Constrained => {
            let (mut feas, mut infeas): (Vec<&TrialRecord>, Vec<&TrialRecord>) =
                ok.into_iter().partition(|r| r.feasible);
            if feas.is_empty() {
                infeas.sort_by(|a, b| b.recall.total_cmp(&a.recall).then(a.trial_index.cmp(&b.trial_index)));
                ordered = infeas;
                n_good.min(ordered.len())
            } else {
                feas.sort_by(|a, b| b.qps.total_cmp(&a.qps).then(a.trial_index.cmp(&b.trial_index)));
                let g = n_good.min(feas.len());
                ordered = feas;
                ordered.extend(infeas);
                g
            }
        }
        Mode::Multi => {
            let points: Vec<(f64, f64)> = ok.iter().map(|r| (r.recall, r.qps)).collect();
            let ranks = non_domination_ranks(&points);
            let span = |f: fn(&TrialRecord) -> f64| {
                let lo = ok.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min);
                let hi = ok.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
                (lo, (hi - lo).max(f64::MIN_POSITIVE))
            };
            let (rl, rs) = span(|r| r.recall);
            let (ql, qs) = span(|r| r.qps);
            let score = |r: &TrialRecord| (r.recall - rl) / rs + (r.qps - ql) / qs;
            let mut idx: Vec<usize> = (0..ok.len()).collect();
            idx.sort_by(|&a, &b| {
                ranks[a]
                    .cmp(&ranks[b])
                    .then(score(ok[b]).total_cmp(&score(ok[a])))
                    .then(ok[a].trial_index.cmp(&ok[b].trial_index))
            });
            ordered = idx.into_iter().map(|i| ok[i]).collect();
            n_good.min(ordered.len())
        }
    };
    let bad_tail = ordered.split_off(n_good);
    let mut bad = bad_tail;
    bad.extend(failed);
    (ordered, bad)
}

/// Truncated-Gaussian Parzen estimator over one dimension, with a broad
/// prior component centered on the range.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    low: f64,
    high: f64,
}

impl Parzen {
    fn fit(obs: &[f64], dim: &Dim, floor_frac: f64) -> Self {
        let range = dim.range().max(1e-12);
        let m = obs.len();
        let min_sigma = (floor_frac * range).max(range / (m + 1).min(100) as f64);
        let mut mus = obs.to_vec();
        mus.push(0.5 * (dim.low + dim.high));
        // each point's width is the larger gap to its sorted neighbors
        let mut order: Vec<usize> = (0..mus.len()).collect();
        order.sort_by(|&a, &b| mus[a].total_cmp(&mus[b]).then(a.cmp(&b)));
        let mut sigmas = vec![range; mus.len()];
        for (pos, &i) in order.iter().enumerate() {
            if i == m {
                continue;
            }
            let left = if pos == 0 { mus[i] - dim.low } else { mus[i] - mus[order[pos - 1]] };
            let right = if pos + 1 == order.len() {
                dim.high - mus[i]
            } else {
                mus[order[pos + 1]] - mus[i]
            };
            sigmas[i] = left.max(right).clamp(min_sigma, range);
        }
        // integer grid: widen so neighboring integers stay reachable
        let (low, high) = if dim.integer {
            (dim.low - 0.5, dim.high + 0.5)
        } else {
            (dim.low, dim.high)
        };
        Self { mus, sigmas, low, high }
    }

    fn log_pdf(&self, x: f64) -> f64 {
        let w = 1.0 / self.mus.len() as f64;
        let mut total = 0.0;
        for (&mu, &s) in self.mus.iter().zip(&self.sigmas) {
            let mass = normal_cdf((self.high - mu) / s) - normal_cdf((self.low - mu) / s);
            let z = (x - mu) / s;
            total += w * (-0.5 * z * z).exp() / (s * (2.0 * std::f64::consts::PI).sqrt() * mass.max(1e-300));
        }
        total.max(1e-300).ln()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let c = rng.random_range(0..self.mus.len());
        let (mu, s) = (self.mus[c], self.sigmas[c]);
        for _ in 0..32 {
            let z: f64 = rng.sample(StandardNormal);
            let x = mu + s * z;
            if x >= self.low && x <= self.high {
                return x;
            }
        }
        mu.clamp(self.low, self.high)
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn trial_rng(seed: u64, trial_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (trial_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform in-bounds sample; integer dimensions are uniform over their
/// integer values.
pub fn uniform_sample(space: &SearchSpace, rng: &mut ChaCha8Rng) -> TrialParams {
    TrialParams {
        d: rng.random_range(space.d.0..=space.d.1),
        alpha: if space.alpha.0 == space.alpha.1 {
            space.alpha.0
        } else {
            rng.random_range(space.alpha.0..=space.alpha.1)
        },
        num_clusters: rng.random_range(space.num_clusters.0..=space.num_clusters.1),
    }
}

/// Proposes the next trial. The random stream depends only on the seed and
/// the history length, so a resumed run proposes exactly what the original
/// run would have.
pub fn tpe_suggest(state: &TpeState, space: &SearchSpace) -> Result<TrialParams> {
    space.validate()?;
    let cfg = &state.config;
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.candidates_per_suggest == 0 {
        return Err(Error::arg("gamma must be in (0, 1) and candidates positive"));
    }
    let mut rng = trial_rng(cfg.seed, state.history.len());
    if state.history.len() < cfg.startup_trials {
        return Ok(uniform_sample(space, &mut rng));
    }
    let (good, bad) = split_history(&state.history, state.mode, cfg.gamma);
    let dims = space.dims();
    let models: Vec<(Parzen, Parzen)> = dims
        .iter()
        .enumerate()
        .map(|(j, dim)| {
            let g: Vec<f64> = good.iter().map(|r| to_vector(&r.params)[j]).collect();
            let b: Vec<f64> = bad.iter().map(|r| to_vector(&r.params)[j]).collect();
            (
                Parzen::fit(&g, dim, cfg.bandwidth_floor),
                Parzen::fit(&b, dim, cfg.bandwidth_floor),
            )
        })
        .collect();

    let mut best: Option<(f64, [f64; 3])> = None;
    for _ in 0..cfg.candidates_per_suggest {
        let mut x = [0.0; 3];
        for (j, dim) in dims.iter().enumerate() {
            x[j] = dim.snap(models[j].0.sample(&mut rng));
        }
        let score: f64 = (0..3)
            .map(|j| models[j].0.log_pdf(x[j]) - models[j].1.log_pdf(x[j]))
            .sum();
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, x));
        }
    }
    Ok(from_vector(best.expect("at least one candidate").1))
}

/// True when `a` dominates `b` (both objectives maximized).
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 >= b.1 && (a.0 > b.0 || a.1 > b.1)
}

/// Non-domination rank of every point (0 = Pareto front).
pub fn non_domination_ranks(points: &[(f64, f64)]) -> Vec<usize> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates(points[i], points[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            }
        }
    }
    let mut ranks = vec![usize::MAX; n];
    let mut front: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    let mut rank = 0;
    while !front.is_empty() {
        let mut next = Vec::new();
        for &i in &front {
            ranks[i] = rank;
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        front = next;
        rank += 1;
    }
    ranks
}

/// Records not dominated in (recall, QPS) by any other record, sorted by
/// recall ascending. Among records with identical objectives only the
/// lowest `trial_index` is kept. Failed trials are ignored.
pub fn pareto_front(records: &[TrialRecord]) -> Vec<TrialRecord> {
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| !r.failed()).collect();
    let mut front: Vec<TrialRecord> = Vec::new();
    for r in &ok {
        let p = (r.recall, r.qps);
        if ok.iter().any(|o| dominates((o.recall, o.qps), p)) {
            continue;
        }
        let dup = ok
            .iter()
            .any(|o| o.recall == r.recall && o.qps == r.qps && o.trial_index < r.trial_index);
        if !dup {
            front.push((*r).clone());
        }
    }
    front.sort_by(|a, b| {
        a.recall
            .total_cmp(&b.recall)
            .then(a.trial_index.cmp(&b.trial_index))
    });
    front
}

/// The best record under the recall constraint: the feasible record with
/// the highest QPS, or, if none is feasible, the one with the highest
/// recall (its `feasible` flag is false). Ties go to the earlier trial.
pub fn best_constrained(history: &[TrialRecord]) -> Option<TrialRecord> {
    let ok = history.iter().filter(|r| !r.failed());
    let feasible = ok
        .clone()
        .filter(|r| r.feasible)
        .max_by(|a, b| a.qps.total_cmp(&b.qps).then(b.trial_index.cmp(&a.trial_index)));
    feasible
        .or_else(|| ok.max_by(|a, b| a.recall.total_cmp(&b.recall).then(b.trial_index.cmp(&a.trial_index))))
        .or_else(|| history.first())
        .cloned()
}

/// Drives the suggest/evaluate loop. Starting from a non-empty history
/// resumes an earlier run.
pub struct Tuner {
    pub state: TpeState,
    pub space: SearchSpace,
}

impl Tuner {
    pub fn new(space: SearchSpace, config: TpeConfig, mode: Mode) -> Result<Self> {
        space.validate()?;
        Ok(Self {
            state: TpeState::new(config, mode),
            space,
        })
    }

    pub fn with_history(mut self, history: Vec<TrialRecord>) -> Self {
        self.state.history = history;
        self
    }

    /// Runs trials until the history holds `budget` records, calling
    /// `on_record` after each new one.
    pub fn run<E, F>(&mut self, budget: usize, evaluator: &mut E, mut on_record: F) -> Result<()>
    where
        E: Evaluator + ?Sized,
        F: FnMut(&TrialRecord) -> Result<()>,
    {
        if budget == 0 {
            return Err(Error::arg("budget must be at least 1"));
        }
        while self.state.history.len() < budget {
            let params = tpe_suggest(&self.state, &self.space)?;
            let idx = self.state.history.len();
            let outcome = evaluator.evaluate(&params);
            let record = TrialRecord::from_outcome(idx, params, outcome, self.state.config.recall_threshold);
            on_record(&record)?;
            self.state.history.push(record);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConstrainedOutcome {
    pub best: TrialRecord,
    pub history: Vec<TrialRecord>,
}

#[derive(Debug, Clone)]
pub struct MultiOutcome {
    pub pareto: Vec<TrialRecord>,
    pub history: Vec<TrialRecord>,
}

/// Maximize QPS subject to the recall threshold.
pub fn optimize_constrained<E: Evaluator + ?Sized>(
    budget: usize,
    space: &SearchSpace,
    evaluator: &mut E,
    config: &TpeConfig,
) -> Result<ConstrainedOutcome> {
    let mut tuner = Tuner::new(*space, config.clone(), Mode::Constrained)?;
    tuner.run(budget, evaluator, |_| Ok(()))?;
    let history = tuner.state.history;
    let best = best_constrained(&history).expect("budget >= 1");
    Ok(ConstrainedOutcome { best, history })
}

/// Maximize recall and QPS jointly.
pub fn optimize_multi<E: Evaluator + ?Sized>(
    budget: usize,
    space: &SearchSpace,
    evaluator: &mut E,
    config: &TpeConfig,
) -> Result<MultiOutcome> {
    let mut tuner = Tuner::new(*space, config.clone(), Mode::Multi)?;
    tuner.run(budget, evaluator, |_| Ok(()))?;
    let history = tuner.state.history;
    let pareto = pareto_front(&history);
    Ok(MultiOutcome { pareto, history })
}

/// Reads a JSON-lines history. A final line without a terminating newline
/// (an interrupted append) is ignored.
pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Appends one record as a single line and syncs it to disk. An
/// unterminated last line left by an interrupted write is dropped first.
pub fn append_history(path: impl AsRef<Path>, record: &TrialRecord) -> Result<()> {
    let path = path.as_ref();
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .read(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut existing = Vec::new();
    f.read_to_end(&mut existing).map_err(|e| Error::io(path, e))?;
    if existing.last().is_some_and(|&b| b != b'\n') {
        let keep = existing.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        f.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Fixed (untuned) settings of the real pipeline evaluator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_degree: usize,
    pub build_pool: usize,
    pub pool_size: usize,
    pub k_hub: usize,
    pub k: usize,
    pub repeats: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub order: StageOrder,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let p = PipelineParams::default();
        Self {
            max_degree: p.max_degree,
            build_pool: p.build_pool,
            pool_size: p.pool_size,
            k_hub: p.k_hub,
            k: p.k,
            repeats: crate::metrics::DEFAULT_REPEATS,
            kmeans_iters: p.kmeans_iters,
            seed: p.seed,
            order: p.order,
        }
    }
}

impl EvalConfig {
    pub fn pipeline_params(&self, t: &TrialParams) -> PipelineParams {
        PipelineParams {
            d: Some(t.d),
            alpha: t.alpha,
            num_clusters: t.num_clusters,
            max_degree: self.max_degree,
            build_pool: self.build_pool,
            pool_size: self.pool_size,
            k_hub: self.k_hub,
            k: self.k,
            kmeans_iters: self.kmeans_iters,
            seed: self.seed,
            order: self.order,
        }
    }
}

/// Measurement plus the search results recall was computed from.
#[derive(Debug, Clone)]
pub struct TrialEvaluation {
    pub measurement: Measurement,
    pub results: Vec<NeighborList>,
}

/// Builds the full pipeline for `params` and measures it.
///
/// Recall is judged against `ground_truth`, which must be computed on the
/// full original database. QPS covers query-side PCA, entry selection and
/// graph search.
pub fn evaluate_trial(
    params: &TrialParams,
    dataset: &VectorSet,
    queries: &VectorSet,
    ground_truth: &[NeighborList],
    config: &EvalConfig,
    profile: Option<&HubnessProfile>,
) -> Result<TrialEvaluation> {
    let pp = config.pipeline_params(params);
    let (pipeline, timings) = Pipeline::build(dataset, &pp, profile)?;
    let sp = pp.search_params();
    let results = pipeline.search(queries, &sp)?;
    let recall = recall_at_k(ground_truth, &results, config.k)?;
    let qps = measure_qps(|q| pipeline.search(q, &sp), queries, config.repeats)?;
    Ok(TrialEvaluation {
        measurement: Measurement {
            recall,
            qps,
            memory_bytes: pipeline.memory_bytes(),
            build_seconds: timings.total(),
        },
        results,
    })
}

/// [`Evaluator`] over the real pipeline. The hubness profile of the
/// database is computed once, on first use, and shared by all trials.
pub struct PipelineEvaluator<'a> {
    pub dataset: &'a VectorSet,
    pub queries: &'a VectorSet,
    pub ground_truth: &'a [NeighborList],
    pub config: EvalConfig,
    profile: Option<HubnessProfile>,
}

impl<'a> PipelineEvaluator<'a> {
    pub fn new(
        dataset: &'a VectorSet,
        queries: &'a VectorSet,
        ground_truth: &'a [NeighborList],
        config: EvalConfig,
    ) -> Self {
        Self {
            dataset,
            queries,
            ground_truth,
            config,
            profile: None,
        }
    }

    pub fn evaluate_full(&mut self, params: &TrialParams) -> Result<TrialEvaluation> {
        let wants_profile = params.alpha < 1.0 && self.config.order == StageOrder::SubsampleThenPca;
        if wants_profile && self.profile.is_none() {
            self.profile = Some(antihub::k_occurrence(self.dataset, self.config.k_hub)?);
        }
        evaluate_trial(
            params,
            self.dataset,
            self.queries,
            self.ground_truth,
            &self.config,
            self.profile.as_ref(),
        )
    }
}

impl Evaluator for PipelineEvaluator<'_> {
    fn evaluate(&mut self, params: &TrialParams) -> Result<Measurement> {
        self.evaluate_full(params).map(|e| e.measurement)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, recall: f64, qps: f64) -> TrialRecord {
        TrialRecord {
            trial_index: i,
            params: TrialParams {
                d: 8,
                alpha: 1.0,
                num_clusters: 1,
            },
            recall,
            qps,
            memory_bytes: 0,
            feasible: recall >= 0.9,
            build_seconds: 0.0,
            error: None,
        }
    }

    #[test]
    fn pareto_examples() {
        assert!(pareto_front(&[]).is_empty());
        let all = pareto_front(&[rec(0, 0.9, 100.0), rec(1, 0.95, 80.0), rec(2, 0.92, 90.0)]);
        assert_eq!(all.iter().map(|r| r.trial_index).collect::<Vec<_>>(), vec![0, 2, 1]);
        let one = pareto_front(&[rec(0, 0.9, 100.0), rec(1, 0.9, 90.0)]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].qps, 100.0);
        let dup = pareto_front(&[rec(3, 0.9, 100.0), rec(1, 0.9, 100.0)]);
        assert_eq!(dup.len(), 1);
        assert_eq!(dup[0].trial_index, 1);
    }

    #[test]
    fn good_group_size_rule() {
        assert_eq!(good_group_size(10, 0.25), 3);
        assert_eq!(good_group_size(1, 0.25), 1);
        assert_eq!(good_group_size(0, 0.25), 1);
        let h: Vec<_> = (0..10).map(|i| rec(i, 0.95, i as f64)).collect();
        let (good, bad) = split_history(&h, Mode::Constrained, 0.25);
        assert_eq!(good.len(), 3);
        assert_eq!(bad.len(), 7);
        assert_eq!(good.iter().map(|r| r.trial_index).collect::<Vec<_>>(), vec![9, 8, 7]);
    }

    #[test]
    fn infeasible_never_good_while_feasible_exist() {
        let mut h: Vec<_> = (0..8).map(|i| rec(i, 0.5, 1000.0 + i as f64)).collect();
        h.push(rec(8, 0.95, 1.0));
        let (good, _) = split_history(&h, Mode::Constrained, 0.25);
        assert_eq!(good.len(), 1);
        assert_eq!(good[0].trial_index, 8);
        let none: Vec<_> = (0..4).map(|i| rec(i, 0.1 * i as f64, 5.0)).collect();
        let (good, _) = split_history(&none, Mode::Constrained, 0.25);
        assert_eq!(good[0].trial_index, 3);
    }

    #[test]
    fn failed_trials_go_bad() {
        let mut h: Vec<_> = (0..4).map(|i| rec(i, 0.95, i as f64)).collect();
        h[3].error = Some("boom".into());
        let (good, bad) = split_history(&h, Mode::Multi, 0.25);
        assert!(good.iter().all(|r| !r.failed()));
        assert!(bad.iter().any(|r| r.failed()));
    }

    #[test]
    fn ranks_on_chain() {
        let pts = [(1.0, 1.0), (2.0, 2.0), (0.5, 3.0), (0.1, 0.1)];
        assert_eq!(non_domination_ranks(&pts), vec![1, 0, 0, 2]);
    }

    #[test]
    fn startup_is_uniform_and_deterministic() {
        let space = SearchSpace::default_for(64);
        let state = TpeState::new(TpeConfig::default(), Mode::Constrained);
        let a = tpe_suggest(&state, &space).unwrap();
        let b = tpe_suggest(&state, &space).unwrap();
        assert_eq!(a, b);
        assert!(space.contains(&a));
    }

    #[test]
    fn rejects_empty_space() {
        let mut space = SearchSpace::default_for(64);
        space.d = (10, 5);
        let state = TpeState::new(TpeConfig::default(), Mode::Constrained);
        assert!(tpe_suggest(&state, &space).is_err());
        assert!(Tuner::new(space, TpeConfig::default(), Mode::Multi).is_err());
    }

    #[test]
    fn budget_one() {
        let space = SearchSpace::default_for(32);
        let mut eval = |_: &TrialParams| {
            Ok(Measurement {
                recall: 0.5,
                qps: 10.0,
                memory_bytes: 1,
                build_seconds: 0.0,
            })
        };
        let out = optimize_constrained(1, &space, &mut eval, &TpeConfig::default()).unwrap();
        assert_eq!(out.history.len(), 1);
        assert!(!out.best.feasible);
        let out = optimize_multi(1, &space, &mut eval, &TpeConfig::default()).unwrap();
        assert_eq!(out.pareto.len(), 1);
        assert!(optimize_multi(0, &space, &mut eval, &TpeConfig::default()).is_err());
    }

    #[test]
    fn evaluator_errors_are_recorded() {
        let space = SearchSpace::default_for(32);
        let mut calls = 0;
        let mut eval = |_: &TrialParams| {
            calls += 1;
            if calls % 2 == 0 {
                Err(Error::arg("stage failed"))
            } else {
                Ok(Measurement {
                    recall: 0.95,
                    qps: calls as f64,
                    memory_bytes: 1,
                    build_seconds: 0.0,
                })
            }
        };
        let out = optimize_constrained(14, &space, &mut eval, &TpeConfig::default()).unwrap();
        assert_eq!(out.history.len(), 14);
        assert_eq!(out.history.iter().filter(|r| r.failed()).count(), 7);
        assert!(out.best.feasible && !out.best.failed());
    }

    #[test]
    fn history_file_tolerates_torn_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        assert!(read_history(&path).unwrap().is_empty());
        append_history(&path, &rec(0, 0.9, 1.0)).unwrap();
        append_history(&path, &rec(1, 0.8, 2.0)).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"trial_index\":2,\"par").unwrap();
        let back = read_history(&path).unwrap();
        assert_eq!(back, vec![rec(0, 0.9, 1.0), rec(1, 0.8, 2.0)]);
        append_history(&path, &rec(2, 0.7, 3.0)).unwrap();
        assert_eq!(read_history(&path).unwrap().len(), 3);
    }
}
