//! Navigating proximity graph.
//!
//! Construction follows the NSG recipe:
//!
//! 1. a k-NN graph over the base (exact below [`EXACT_KNN_LIMIT`] points,
//!    NN-descent above it),
//! 2. MRNG edge selection per node: candidates are scanned by increasing
//!    distance and `c` is accepted only if no accepted neighbor `s` has
//!    `dist(s, c) < dist(node, c)`,
//! 3. reverse-edge insertion, re-selecting with the same rule when a list
//!    overflows,
//! 4. the navigating node is the point closest to the dataset mean,
//! 5. unreachable components are attached to the reached part by their
//!    closest cross edge, which may push one node to `max_degree + 1`.
//!
//! Search is best-first over a bounded candidate pool.

use std::cell::RefCell;
use std::collections::VecDeque;

use rayon::prelude::*;

use crate::dataset::{NeighborList, VectorSet};
use crate::distance::squared_l2;
use crate::error::{Error, Result};
use crate::knn::{self, sort_pairs};
use crate::nndescent;

pub const DEFAULT_MAX_DEGREE: usize = 32;
pub const DEFAULT_BUILD_POOL: usize = 64;
/// Above this many points the k-NN graph is built with NN-descent.
pub const EXACT_KNN_LIMIT: usize = 200_000;

/// How the initial k-NN graph is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KnnGraphMethod {
    /// Exact up to [`EXACT_KNN_LIMIT`] points, NN-descent beyond.
    #[default]
    Auto,
    Exact,
    NnDescent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    pub max_degree: usize,
    pub build_pool: usize,
    pub seed: u64,
    pub knn_method: KnnGraphMethod,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_degree: DEFAULT_MAX_DEGREE,
            build_pool: DEFAULT_BUILD_POOL,
            seed: 0,
            knn_method: KnnGraphMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    pub k: usize,
    pub pool_size: usize,
    pub entry: Option<u32>,
}

impl SearchParams {
    pub fn new(k: usize, pool_size: usize) -> Self {
        Self {
            k,
            pool_size,
            entry: None,
        }
    }

    pub fn with_entry(self, entry: u32) -> Self {
        Self {
            entry: Some(entry),
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.pool_size < self.k {
            return Err(Error::arg(format!(
                "need pool_size >= k >= 1, got k={} pool_size={}",
                self.k, self.pool_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    base: VectorSet,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    max_degree: usize,
    default_entry: u32,
    /// Nodes that received a connectivity-repair edge.
    repaired: Vec<u32>,
}

impl GraphIndex {
    pub fn base(&self) -> &VectorSet {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.count()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn default_entry(&self) -> u32 {
        self.default_entry
    }

    pub fn repaired_nodes(&self) -> &[u32] {
        &self.repaired
    }

    #[inline]
    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn flat_neighbors(&self) -> &[u32] {
        &self.neighbors
    }

    pub fn mean_degree(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.edge_count() as f64 / self.len() as f64
        }
    }

    /// Reassembles an index from its CSR parts, checking every structural
    /// invariant.
    pub fn from_parts(
        base: VectorSet,
        offsets: Vec<usize>,
        neighbors: Vec<u32>,
        max_degree: usize,
        default_entry: u32,
        repaired: Vec<u32>,
    ) -> Result<Self> {
        let n = base.count();
        if offsets.len() != n + 1 || offsets[0] != 0 || *offsets.last().unwrap() != neighbors.len() {
            return Err(Error::arg("adjacency offsets are inconsistent"));
        }
        if n > 0 && default_entry as usize >= n {
            return Err(Error::arg("default entry out of range"));
        }
        for node in 0..n {
            let (a, b) = (offsets[node], offsets[node + 1]);
            if b < a {
                return Err(Error::arg(format!("offsets decrease at node {node}")));
            }
            let list = &neighbors[a..b];
            let limit = if repaired.contains(&(node as u32)) {
                max_degree + 1
            } else {
                max_degree
            };
            if list.len() > limit {
                return Err(Error::arg(format!("node {node} exceeds max degree")));
            }
            for (i, &v) in list.iter().enumerate() {
                if v as usize >= n || v as usize == node || list[..i].contains(&v) {
                    return Err(Error::arg(format!("invalid neighbor {v} at node {node}")));
                }
            }
        }
        Ok(Self {
            base,
            offsets,
            neighbors,
            max_degree,
            default_entry,
            repaired,
        })
    }

    /// Changes the node used when a search does not name its own entry.
    pub fn set_entry_point(&mut self, node: u32) -> Result<()> {
        if node as usize >= self.len() {
            return Err(Error::arg(format!(
                "entry point {node} out of range (count {})",
                self.len()
            )));
        }
        self.default_entry = node;
        Ok(())
    }

    /// Best-first search for the `k` nearest nodes to `query`.
    pub fn search(&self, query: &[f32], params: &SearchParams) -> Result<NeighborList> {
        self.check_search(query.len(), params)?;
        Ok(self.search_unchecked(query, params))
    }

    /// Searches every row of `queries` with the same parameters, in parallel.
    pub fn search_batch(&self, queries: &VectorSet, params: &SearchParams) -> Result<Vec<NeighborList>> {
        if queries.count() == 0 {
            return Ok(Vec::new());
        }
        self.check_search(queries.dim(), params)?;
        Ok((0..queries.count())
            .into_par_iter()
            .map(|i| self.search_unchecked(queries.row(i), params))
            .collect())
    }

    pub(crate) fn check_search(&self, dim: usize, params: &SearchParams) -> Result<()> {
        params.validate()?;
        if dim != self.base.dim() {
            return Err(Error::arg(format!(
                "query dimension {dim} does not match index dimension {}",
                self.base.dim()
            )));
        }
        if params.k > self.len() {
            return Err(Error::arg(format!(
                "k={} exceeds index size {}",
                params.k,
                self.len()
            )));
        }
        if let Some(e) = params.entry {
            if e as usize >= self.len() {
                return Err(Error::arg(format!("entry point {e} out of range")));
            }
        }
        Ok(())
    }

    pub(crate) fn search_unchecked(&self, query: &[f32], params: &SearchParams) -> NeighborList {
        let entry = params.entry.unwrap_or(self.default_entry);
        let cap = params.pool_size;
        VISITED.with(|cell| {
            let mut visited = cell.borrow_mut();
            visited.reset(self.len());

            let mut pool: Vec<Candidate> = Vec::with_capacity(cap + 1);
            visited.insert(entry);
            pool.push(Candidate {
                dist: squared_l2(query, self.base.row(entry as usize)),
                id: entry,
                expanded: false,
            });
            let mut cursor = 0;
            while cursor < pool.len() {
                pool[cursor].expanded = true;
                let node = pool[cursor].id as usize;
                let mut lowest = pool.len();
                for &nb in self.neighbors(node) {
                    if !visited.insert(nb) {
                        continue;
                    }
                    let dist = squared_l2(query, self.base.row(nb as usize));
                    if pool.len() == cap && !closer(dist, nb, pool[cap - 1].dist, pool[cap - 1].id) {
                        continue;
                    }
                    let pos = pool.partition_point(|c| closer(c.dist, c.id, dist, nb));
                    pool.insert(
                        pos,
                        Candidate {
                            dist,
                            id: nb,
                            expanded: false,
                        },
                    );
                    if pool.len() > cap {
                        pool.pop();
                    }
                    lowest = lowest.min(pos);
                }
                cursor = lowest.min(cursor + 1);
                while cursor < pool.len() && pool[cursor].expanded {
                    cursor += 1;
                }
            }
            pool.truncate(params.k);
            NeighborList::from_sorted(pool.into_iter().map(|c| (c.dist, c.id)))
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f32,
    id: u32,
    expanded: bool,
}

#[inline]
fn closer(da: f32, ia: u32, db: f32, ib: u32) -> bool {
    da < db || (da == db && ia < ib)
}

struct VisitedSet {
    stamps: Vec<u32>,
    epoch: u32,
}

impl VisitedSet {
    fn reset(&mut self, n: usize) {
        if self.stamps.len() < n {
            self.stamps.resize(n, 0);
        }
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.stamps.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
    }

    /// Marks `id`; returns false if it was already marked.
    #[inline]
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.stamps[id as usize];
        if *slot == self.epoch {
            false
        } else {
            *slot = self.epoch;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<VisitedSet> = const { RefCell::new(VisitedSet { stamps: Vec::new(), epoch: 0 }) };
}

/// Builds an index with the default k-NN method.
pub fn build_index(base: VectorSet, max_degree: usize, build_pool: usize, seed: u64) -> Result<GraphIndex> {
    build_index_with(
        base,
        &BuildParams {
            max_degree,
            build_pool,
            seed,
            knn_method: KnnGraphMethod::Auto,
        },
    )
}

pub fn build_index_with(base: VectorSet, params: &BuildParams) -> Result<GraphIndex> {
    let n = base.count();
    if n < 2 {
        return Err(Error::arg(format!("index needs at least 2 vectors, got {n}")));
    }
    if params.max_degree == 0 {
        return Err(Error::arg("max_degree must be positive"));
    }
    if params.build_pool < params.max_degree {
        return Err(Error::arg(format!(
            "build_pool {} smaller than max_degree {}",
            params.build_pool, params.max_degree
        )));
    }
    let k = params.build_pool.min(n - 1);
    let use_exact = match params.knn_method {
        KnnGraphMethod::Exact => true,
        KnnGraphMethod::NnDescent => false,
        KnnGraphMethod::Auto => n <= EXACT_KNN_LIMIT,
    };
    let knn_lists: Vec<Vec<(f32, u32)>> = if use_exact {
        knn::exact_knn(&base, &base, k, true)
            .into_iter()
            .map(|nl| nl.distances.into_iter().zip(nl.ids).collect())
            .collect()
    } else {
        nndescent::knn_graph(&base, k, params.seed)
    };

    let mut lists: Vec<Vec<(f32, u32)>> = knn_lists
        .par_iter()
        .enumerate()
        .map(|(node, cands)| mrng_select(&base, node as u32, cands, params.max_degree))
        .collect();

    add_reverse_edges(&base, &mut lists, params.max_degree);

    let default_entry = nearest_to_mean(&base);
    let mut adjacency: Vec<Vec<u32>> = lists
        .into_iter()
        .map(|l| l.into_iter().map(|(_, id)| id).collect())
        .collect();
    let repaired = repair_connectivity(&base, &mut adjacency, &knn_lists, default_entry, params.max_degree);

    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    let mut neighbors = Vec::with_capacity(adjacency.iter().map(Vec::len).sum());
    for list in adjacency {
        neighbors.extend(list);
        offsets.push(neighbors.len());
    }
    Ok(GraphIndex {
        base,
        offsets,
        neighbors,
        max_degree: params.max_degree,
        default_entry,
        repaired,
    })
}

/// MRNG selection over candidates sorted by `(distance to node, id)`.
pub(crate) fn mrng_select(base: &VectorSet, node: u32, cands: &[(f32, u32)], max_degree: usize) -> Vec<(f32, u32)> {
    let mut accepted: Vec<(f32, u32)> = Vec::with_capacity(max_degree);
    for &(d_nc, c) in cands {
        if accepted.len() == max_degree {
            break;
        }
        if c == node || accepted.iter().any(|&(_, s)| s == c) {
            continue;
        }
        let row_c = base.row(c as usize);
        let occluded = accepted
            .iter()
            .any(|&(_, s)| squared_l2(base.row(s as usize), row_c) < d_nc);
        if !occluded {
            accepted.push((d_nc, c));
        }
    }
    accepted
}

fn add_reverse_edges(base: &VectorSet, lists: &mut [Vec<(f32, u32)>], max_degree: usize) {
    let forward: Vec<Vec<(f32, u32)>> = lists.to_vec();
    for (u, out) in forward.iter().enumerate() {
        let u = u as u32;
        for &(d, v) in out {
            let target = &mut lists[v as usize];
            if target.iter().any(|&(_, w)| w == u) {
                continue;
            }
            if target.len() < max_degree {
                let pos = target.partition_point(|&(dw, w)| closer(dw, w, d, u));
                target.insert(pos, (d, u));
            } else {
                let mut pool = target.clone();
                pool.push((d, u));
                sort_pairs(&mut pool);
                *target = mrng_select(base, v, &pool, max_degree);
            }
        }
    }
}

fn nearest_to_mean(base: &VectorSet) -> u32 {
    let mean = knn::column_mean(base);
    knn::scan(base, &mean, 1, None).ids[0]
}

/// Attaches every component unreachable from `entry`. Returns the nodes
/// that received an extra edge.
fn repair_connectivity(
    base: &VectorSet,
    adjacency: &mut [Vec<u32>],
    knn_lists: &[Vec<(f32, u32)>],
    entry: u32,
    max_degree: usize,
) -> Vec<u32> {
    let n = adjacency.len();
    let mut reached = vec![false; n];
    let mut queue = VecDeque::new();
    reached[entry as usize] = true;
    queue.push_back(entry);
    bfs(adjacency, &mut reached, &mut queue);

    let mut repaired = Vec::new();
    let mut next_unreached = 0;
    loop {
        while next_unreached < n && reached[next_unreached] {
            next_unreached += 1;
        }
        if next_unreached == n {
            break;
        }
        // component of the lowest unreached id, following edges within it
        let mut component = vec![next_unreached as u32];
        let mut in_comp = vec![false; 0];
        in_comp.resize(n, false);
        in_comp[next_unreached] = true;
        let mut i = 0;
        while i < component.len() {
            let u = component[i] as usize;
            for &v in &adjacency[u] {
                if !reached[v as usize] && !in_comp[v as usize] {
                    in_comp[v as usize] = true;
                    component.push(v);
                }
            }
            i += 1;
        }

        // (reached, member) pair whose reached end still has room: the
        // closest one visible in the k-NN lists, else a mutually nearest
        // pair found by alternating nearest-neighbor steps
        let has_room = |r: usize| reached[r] && adjacency[r].len() <= max_degree;
        let mut best: Option<(f32, u32, u32)> = None;
        for &m in &component {
            if let Some(&(d, r)) = knn_lists[m as usize].iter().find(|&&(_, r)| has_room(r as usize)) {
                if best.is_none_or(|b| (d, r, m) < b) {
                    best = Some((d, r, m));
                }
            }
        }
        if best.is_none() {
            let targets: Vec<u32> = (0..n as u32).filter(|&r| has_room(r as usize)).collect();
            let rows: Vec<usize> = component.iter().map(|&m| m as usize).collect();
            let centroid = knn::column_mean(&base.select_rows(&rows).expect("rows in range"));
            let mut r = nearest_among(base, &targets, &centroid).1;
            let mut m = nearest_among(base, &component, base.row(r as usize)).1;
            for _ in 0..MAX_REPAIR_STEPS {
                let (d, next_r) = nearest_among(base, &targets, base.row(m as usize));
                let next_m = nearest_among(base, &component, base.row(next_r as usize)).1;
                best = Some((d, next_r, m));
                if (next_r, next_m) == (r, m) {
                    break;
                }
                (r, m) = (next_r, next_m);
            }
        }
        let (_, r, m) = best.expect("a reached node with spare degree always exists");
        if adjacency[r as usize].len() == max_degree {
            repaired.push(r);
        }
        adjacency[r as usize].push(m);
        reached[m as usize] = true;
        queue.push_back(m);
        bfs(adjacency, &mut reached, &mut queue);
    }
    repaired.sort_unstable();
    repaired
}

const MAX_REPAIR_STEPS: usize = 8;

/// Nearest of `candidates` to `point`, ties to the lower id.
fn nearest_among(base: &VectorSet, candidates: &[u32], point: &[f32]) -> (f32, u32) {
    candidates
        .iter()
        .map(|&c| (squared_l2(point, base.row(c as usize)), c))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("non-empty candidates")
}

fn bfs(adjacency: &[Vec<u32>], reached: &mut [bool], queue: &mut VecDeque<u32>) {
    while let Some(u) = queue.pop_front() {
        for &v in &adjacency[u as usize] {
            if !reached[v as usize] {
                reached[v as usize] = true;
                queue.push_back(v);
            }
        }
    }
}

/// Nodes reachable from `start` by following edges.
pub fn reachable_from(index: &GraphIndex, start: u32) -> usize {
    let mut reached = vec![false; index.len()];
    let mut queue = VecDeque::from([start]);
    reached[start as usize] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in index.neighbors(u as usize) {
            if !reached[v as usize] {
                reached[v as usize] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count
}
