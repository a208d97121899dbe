//! k-means entry-point selection and batched search with per-query entry
//! points.
//!
//! The base is clustered with k-means; each cluster is represented by the
//! database vector closest to its mean. A query starts its graph traversal
//! from the representative of the mean closest to it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{NeighborList, VectorSet};
use crate::distance::squared_l2;
use crate::error::{Error, Result};
use crate::graph::{GraphIndex, SearchParams};
use crate::knn;

pub const DEFAULT_MAX_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryPointSelector {
    dim: usize,
    /// Row-major `num_clusters × dim`.
    means: Vec<f32>,
    /// For each cluster, the database row nearest to its mean.
    centroid_ids: Vec<u32>,
}

impl EntryPointSelector {
    pub fn from_parts(dim: usize, means: Vec<f32>, centroid_ids: Vec<u32>) -> Result<Self> {
        if dim == 0 || centroid_ids.is_empty() || means.len() != dim * centroid_ids.len() {
            return Err(Error::arg("selector parts do not match dimensions"));
        }
        Ok(Self {
            dim,
            means,
            centroid_ids,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centroid_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn means(&self) -> &[f32] {
        &self.means
    }

    pub fn mean(&self, c: usize) -> &[f32] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn centroid_ids(&self) -> &[u32] {
        &self.centroid_ids
    }

    /// Index of the mean closest to `query` (lowest index on ties).
    fn nearest_cluster(&self, query: &[f32]) -> usize {
        let mut best = (f32::INFINITY, 0);
        for c in 0..self.num_clusters() {
            let d = squared_l2(query, self.mean(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }
}

/// Result of a k-means fit together with the objective after every
/// assignment step.
#[derive(Debug, Clone)]
pub struct KMeansTrace {
    pub selector: EntryPointSelector,
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` updates have run.
pub fn kmeans_fit(base: &VectorSet, num_clusters: usize, max_iters: usize, seed: u64) -> Result<EntryPointSelector> {
    kmeans_fit_traced(base, num_clusters, max_iters, seed).map(|t| t.selector)
}

pub fn kmeans_fit_traced(base: &VectorSet, num_clusters: usize, max_iters: usize, seed: u64) -> Result<KMeansTrace> {
    let n = base.count();
    let dim = base.dim();
    if num_clusters == 0 || num_clusters > n {
        return Err(Error::arg(format!(
            "num_clusters must be in [1, {n}], got {num_clusters}"
        )));
    }
    if max_iters == 0 {
        return Err(Error::arg("max_iters must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = plus_plus_init(base, num_clusters, &mut rng);

    let (mut assign, mut dists) = assign_all(base, &means, num_clusters);
    let mut objectives = vec![objective(&dists)];
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        reseed_empty(&mut assign, &mut dists, num_clusters);
        means = centroids(base, &assign, num_clusters);
        let (next, next_dists) = assign_all(base, &means, num_clusters);
        objectives.push(objective(&next_dists));
        let converged = next == assign;
        assign = next;
        dists = next_dists;
        if converged {
            break;
        }
    }

    let centroid_ids = means
        .chunks_exact(dim)
        .map(|m| knn::scan(base, m, 1, None).ids[0])
        .collect();
    Ok(KMeansTrace {
        selector: EntryPointSelector {
            dim,
            means,
            centroid_ids,
        },
        objectives,
        iterations,
    })
}

fn plus_plus_init(base: &VectorSet, c: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = base.count();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut means = base.row(first).to_vec();
    let mut d2: Vec<f64> = base.rows().map(|r| squared_l2(r, base.row(first)) as f64).collect();
    for _ in 1..c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can run past the end; take the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        let row = base.row(pick);
        means.extend_from_slice(row);
        for (i, r) in base.rows().enumerate() {
            let d = squared_l2(r, row) as f64;
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    means
}

fn assign_all(base: &VectorSet, means: &[f32], c: usize) -> (Vec<u32>, Vec<f64>) {
    let dim = base.dim();
    (0..base.count())
        .into_par_iter()
        .map(|i| {
            let row = base.row(i);
            let mut best = (f32::INFINITY, 0u32);
            for k in 0..c {
                let d = squared_l2(row, &means[k * dim..(k + 1) * dim]);
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            (best.1, best.0 as f64)
        })
        .unzip()
}

fn objective(dists: &[f64]) -> f64 {
    dists.iter().sum()
}

/// Gives every empty cluster the point currently farthest from its mean.
fn reseed_empty(assign: &mut [u32], dists: &mut [f64], c: usize) {
    let mut sizes = vec![0usize; c];
    for &a in assign.iter() {
        sizes[a as usize] += 1;
    }
    for cluster in 0..c {
        if sizes[cluster] > 0 {
            continue;
        }
        let mut far = None;
        for (i, &d) in dists.iter().enumerate() {
            // never empty another cluster
            if sizes[assign[i] as usize] <= 1 {
                continue;
            }
            if far.is_none_or(|(fd, _)| d > fd) {
                far = Some((d, i));
            }
        }
        let Some((_, i)) = far else { break };
        sizes[assign[i] as usize] -= 1;
        assign[i] = cluster as u32;
        dists[i] = 0.0;
        sizes[cluster] = 1;
    }
}

fn centroids(base: &VectorSet, assign: &[u32], c: usize) -> Vec<f32> {
    let dim = base.dim();
    let mut sums = vec![0.0f64; c * dim];
    let mut sizes = vec![0usize; c];
    for (row, &a) in base.rows().zip(assign) {
        let a = a as usize;
        sizes[a] += 1;
        for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    sums.chunks_exact(dim)
        .zip(&sizes)
        .flat_map(|(s, &size)| s.iter().map(move |v| (v / size.max(1) as f64) as f32))
        .collect()
}

/// Representative node of the cluster whose mean is closest to `query`.
pub fn select_entry(selector: &EntryPointSelector, query: &[f32]) -> Result<u32> {
    if query.len() != selector.dim {
        return Err(Error::arg(format!(
            "query dimension {} does not match selector dimension {}",
            query.len(),
            selector.dim
        )));
    }
    Ok(selector.centroid_ids[selector.nearest_cluster(query)])
}

fn check_dims(index: &GraphIndex, selector: &EntryPointSelector, queries: &VectorSet) -> Result<()> {
    if selector.dim != index.base().dim() {
        return Err(Error::arg(format!(
            "selector dimension {} does not match index dimension {}",
            selector.dim,
            index.base().dim()
        )));
    }
    if queries.count() > 0 && queries.dim() != selector.dim {
        return Err(Error::arg(format!(
            "query dimension {} does not match selector dimension {}",
            queries.dim(),
            selector.dim
        )));
    }
    if let Some(&bad) = selector.centroid_ids.iter().find(|&&id| id as usize >= index.len()) {
        return Err(Error::arg(format!("selector centroid {bad} not in index")));
    }
    Ok(())
}

/// One query at a time: pick the entry, make it the index's entry point,
/// search. The index's previous entry point is restored afterwards.
pub fn batch_search_naive(
    index: &mut GraphIndex,
    selector: &EntryPointSelector,
    queries: &VectorSet,
    params: &SearchParams,
) -> Result<Vec<NeighborList>> {
    check_dims(index, selector, queries)?;
    let saved = index.default_entry();
    let params = SearchParams {
        entry: None,
        ..*params
    };
    let mut results = Vec::with_capacity(queries.count());
    let mut outcome = Ok(());
    for query in queries.rows() {
        let step = select_entry(selector, query)
            .and_then(|ep| index.set_entry_point(ep))
            .and_then(|_| index.search(query, &params));
        match step {
            Ok(r) => results.push(r),
            Err(e) => {
                outcome = Err(e);
                break;
            }
        }
    }
    index.set_entry_point(saved)?;
    outcome.map(|_| results)
}

/// Entry points for all queries in one pass, queries partitioned by entry
/// (ascending entry id), each partition searched as a batch, results
/// scattered back to query order.
pub fn batch_search_grouped(
    index: &GraphIndex,
    selector: &EntryPointSelector,
    queries: &VectorSet,
    params: &SearchParams,
) -> Result<Vec<NeighborList>> {
    check_dims(index, selector, queries)?;
    if queries.count() == 0 {
        return Ok(Vec::new());
    }
    index.check_search(queries.dim(), params)?;

    let entries: Vec<u32> = (0..queries.count())
        .into_par_iter()
        .map(|i| selector.centroid_ids[selector.nearest_cluster(queries.row(i))])
        .collect();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (qi, &ep) in entries.iter().enumerate() {
        groups.entry(ep).or_default().push(qi);
    }

    let mut results: Vec<Option<NeighborList>> = vec![None; queries.count()];
    let searched: Vec<(usize, NeighborList)> = groups
        .par_iter()
        .flat_map_iter(|(&ep, members)| {
            let group_params = params.with_entry(ep);
            members
                .iter()
                .map(move |&qi| (qi, index.search_unchecked(queries.row(qi), &group_params)))
        })
        .collect();
    for (qi, list) in searched {
        results[qi] = Some(list);
    }
    Ok(results.into_iter().map(|r| r.expect("every query searched")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, generate_with_queries};
    use crate::graph::build_index;

    #[test]
    fn single_cluster_is_dataset_mean() {
        let base = generate_synthetic(200, 5, 3, 0.7, 2).unwrap();
        let sel = kmeans_fit(&base, 1, 25, 0).unwrap();
        let mean = knn::column_mean(&base);
        for (a, b) in sel.mean(0).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(sel.centroid_ids()[0], knn::scan(&base, sel.mean(0), 1, None).ids[0]);
        let q = [9.0f32; 5];
        assert_eq!(select_entry(&sel, &q).unwrap(), sel.centroid_ids()[0]);
    }

    #[test]
    fn one_cluster_per_point() {
        let base = generate_synthetic(30, 3, 3, 0.9, 5).unwrap();
        let sel = kmeans_fit(&base, 30, 25, 1).unwrap();
        let mut ids = sel.centroid_ids().to_vec();
        ids.sort_unstable();
        assert_eq!(ids, (0..30).collect::<Vec<u32>>());
    }

    #[test]
    fn two_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vals = Vec::new();
        for i in 0..400 {
            let cx = if i % 2 == 0 { 10.0 } else { -10.0 };
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            let y: f64 = rng.sample(rand_distr::StandardNormal);
            vals.push((cx + 0.5 * x) as f32);
            vals.push((0.5 * y) as f32);
        }
        let base = VectorSet::new(2, vals).unwrap();
        let sel = kmeans_fit(&base, 2, 25, 7).unwrap();
        let mut xs: Vec<(f32, f32)> = (0..2).map(|c| (sel.mean(c)[0], sel.mean(c)[1])).collect();
        xs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!((xs[0].0 + 10.0).abs() < 0.5 && xs[0].1.abs() < 0.5);
        assert!((xs[1].0 - 10.0).abs() < 0.5 && xs[1].1.abs() < 0.5);
    }

    #[test]
    fn objective_never_increases() {
        let base = generate_synthetic(2000, 6, 8, 0.8, 4).unwrap();
        for seed in 0..3 {
            let t = kmeans_fit_traced(&base, 12, 50, seed).unwrap();
            for w in t.objectives.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", t.objectives);
            }
        }
    }

    #[test]
    fn errors() {
        let base = generate_synthetic(5, 2, 1, 1.0, 0).unwrap();
        assert!(kmeans_fit(&base, 6, 10, 0).is_err());
        assert!(kmeans_fit(&base, 0, 10, 0).is_err());
        let sel = kmeans_fit(&base, 2, 10, 0).unwrap();
        assert!(select_entry(&sel, &[0.0]).is_err());
    }

    #[test]
    fn zero_distance_mean_wins() {
        let sel = EntryPointSelector::from_parts(
            2,
            vec![0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 4.0, 0.0],
            vec![10, 11, 12, 13, 14],
        )
        .unwrap();
        assert_eq!(select_entry(&sel, &[3.0, 0.0]).unwrap(), 13);
        // equidistant between clusters 1 and 2: lower index wins
        assert_eq!(select_entry(&sel, &[1.5, 0.0]).unwrap(), 11);
    }

    #[test]
    fn grouped_matches_naive_small() {
        let (base, queries) = generate_with_queries(1500, 120, 8, 6, 0.8, 1).unwrap();
        let mut idx = build_index(base.clone(), 16, 32, 0).unwrap();
        let sel = kmeans_fit(&base, 8, 25, 0).unwrap();
        let p = SearchParams::new(10, 20);
        let grouped = batch_search_grouped(&idx, &sel, &queries, &p).unwrap();
        let before = idx.default_entry();
        let naive = batch_search_naive(&mut idx, &sel, &queries, &p).unwrap();
        assert_eq!(idx.default_entry(), before);
        assert_eq!(grouped, naive);
        let empty = VectorSet::empty();
        assert!(batch_search_grouped(&idx, &sel, &empty, &p).unwrap().is_empty());
        assert!(batch_search_naive(&mut idx, &sel, &empty, &p).unwrap().is_empty());
    }
}
