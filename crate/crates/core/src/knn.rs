//! Blocked exact k-NN.
//!
//! Candidate distances come from a GEMM over mean-centered data
//! (`|q|² + |b|² - 2 q·b`). Each query keeps a few more candidates than it
//! needs, recomputes them with [`squared_l2`], and accepts the result only
//! when the k-th exact distance is separated from the best excluded
//! candidate by more than the rounding bound of the GEMM path. Otherwise the
//! query falls back to a direct scan, so the output is always exact with
//! respect to [`squared_l2`].

use rayon::prelude::*;

use crate::dataset::{NeighborList, VectorSet};
use crate::distance::{squared_l2, squared_norm};

const QUERY_BLOCK: usize = 128;
const BASE_BLOCK: usize = 1024;
const SCAN_CHUNK: usize = 16;

/// Exact `k` nearest neighbors of every query row. With `exclude_self`,
/// `queries` must be `base` itself and row `i` never returns id `i`.
///
/// Callers validate `k` against the number of available points.
pub(crate) fn exact_knn(
    base: &VectorSet,
    queries: &VectorSet,
    k: usize,
    exclude_self: bool,
) -> Vec<NeighborList> {
    if queries.count() == 0 {
        return Vec::new();
    }
    let dim = base.dim();
    let n = base.count();
    let keep = 2 * k + 8;

    let mean = column_mean(base);
    let base_c = center(base, &mean);
    let query_c = center(queries, &mean);
    let base_norms: Vec<f32> = base_c.chunks_exact(dim).map(squared_norm).collect();
    let max_base_norm = base_norms.iter().cloned().fold(0.0f32, f32::max);
    let rel = 4.0 * (dim as f32 + 8.0) * f32::EPSILON;

    let blocks: Vec<Vec<NeighborList>> = query_c
        .par_chunks(QUERY_BLOCK * dim)
        .enumerate()
        .map(|(bi, qblock)| {
            let first_q = bi * QUERY_BLOCK;
            let rows = qblock.len() / dim;
            let qnorms: Vec<f32> = qblock.chunks_exact(dim).map(squared_norm).collect();
            let mut cands: Vec<Vec<(f32, u32)>> = vec![Vec::with_capacity(2 * keep); rows];
            let mut thresholds = vec![f32::INFINITY; rows];
            let mut dots = vec![0.0f32; rows * BASE_BLOCK];

            for b0 in (0..n).step_by(BASE_BLOCK) {
                let cols = BASE_BLOCK.min(n - b0);
                let bblock = &base_c[b0 * dim..(b0 + cols) * dim];
                // dots[r, c] = -2 q_r · b_c
                unsafe {
                    matrixmultiply::sgemm(
                        rows,
                        dim,
                        cols,
                        -2.0,
                        qblock.as_ptr(),
                        dim as isize,
                        1,
                        bblock.as_ptr(),
                        1,
                        dim as isize,
                        0.0,
                        dots.as_mut_ptr(),
                        cols as isize,
                        1,
                    );
                }
                let bnorms = &base_norms[b0..b0 + cols];
                for r in 0..rows {
                    let qi = first_q + r;
                    let qn = qnorms[r];
                    let row = &mut dots[r * cols..(r + 1) * cols];
                    for (v, &bn) in row.iter_mut().zip(bnorms) {
                        *v += qn + bn;
                    }
                    let list = &mut cands[r];
                    let mut thr = thresholds[r];
                    for (ci, chunk) in row.chunks(SCAN_CHUNK).enumerate() {
                        let lowest = chunk.iter().fold(f32::INFINITY, |m, &v| if v < m { v } else { m });
                        if lowest >= thr {
                            continue;
                        }
                        for (j, &approx) in chunk.iter().enumerate() {
                            if approx < thr {
                                let id = b0 + ci * SCAN_CHUNK + j;
                                if exclude_self && id == qi {
                                    continue;
                                }
                                list.push((approx, id as u32));
                                if list.len() >= 2 * keep {
                                    thr = shrink(list, keep);
                                }
                            }
                        }
                    }
                    thresholds[r] = thr;
                }
            }

            (0..rows)
                .map(|r| {
                    let qi = first_q + r;
                    let list = &mut cands[r];
                    let complete = thresholds[r].is_infinite();
                    if !complete && list.len() > keep {
                        shrink(list, keep);
                    }
                    let worst_kept = list.iter().map(|p| p.0).fold(f32::MIN, f32::max);
                    let query = queries.row(qi);
                    let mut exact: Vec<(f32, u32)> = list
                        .iter()
                        .map(|&(_, id)| (squared_l2(query, base.row(id as usize)), id))
                        .collect();
                    sort_pairs(&mut exact);
                    exact.truncate(k);
                    let tol = rel * (qnorms[r] + max_base_norm + 1.0);
                    let certified = complete
                        || exact.len() == k && exact[k - 1].0 < worst_kept - tol;
                    if certified {
                        NeighborList::from_sorted(exact)
                    } else {
                        scan(base, query, k, exclude_self.then_some(qi))
                    }
                })
                .collect()
        })
        .collect();
    blocks.into_iter().flatten().collect()
}

/// Keeps the `keep` smallest approximate distances and returns the new
/// admission threshold (the largest kept distance).
fn shrink(list: &mut Vec<(f32, u32)>, keep: usize) -> f32 {
    list.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0));
    list.truncate(keep);
    list.iter().map(|p| p.0).fold(f32::MIN, f32::max)
}

pub(crate) fn sort_pairs(pairs: &mut [(f32, u32)]) {
    pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
}

/// Direct exact scan of the whole base for one query.
pub(crate) fn scan(base: &VectorSet, query: &[f32], k: usize, skip: Option<usize>) -> NeighborList {
    let mut all: Vec<(f32, u32)> = base
        .rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, row)| (squared_l2(query, row), i as u32))
        .collect();
    if all.len() > k {
        all.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
    }
    sort_pairs(&mut all);
    NeighborList::from_sorted(all)
}

pub(crate) fn column_mean(vs: &VectorSet) -> Vec<f32> {
    let dim = vs.dim();
    let mut acc = vec![0.0f64; dim];
    for row in vs.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    let n = vs.count().max(1) as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

fn center(vs: &VectorSet, mean: &[f32]) -> Vec<f32> {
    let mut out = vs.values().to_vec();
    for row in out.chunks_exact_mut(mean.len().max(1)) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    #[test]
    fn matches_direct_scan() {
        let base = generate_synthetic(3000, 24, 5, 0.8, 11).unwrap();
        let queries = generate_synthetic(150, 24, 5, 0.8, 12).unwrap();
        let fast = exact_knn(&base, &queries, 10, false);
        for (qi, got) in fast.iter().enumerate() {
            assert_eq!(got, &scan(&base, queries.row(qi), 10, None));
        }
    }

    #[test]
    fn excludes_self() {
        let base = generate_synthetic(500, 8, 2, 0.9, 1).unwrap();
        let res = exact_knn(&base, &base, 5, true);
        for (i, nl) in res.iter().enumerate() {
            assert!(!nl.ids.contains(&(i as u32)));
            assert_eq!(nl, &scan(&base, base.row(i), 5, Some(i)));
        }
    }

    #[test]
    fn duplicates_break_ties_by_id() {
        let base = VectorSet::new(1, vec![1.0, 0.0, 1.0, 1.0, 5.0]).unwrap();
        let q = VectorSet::new(1, vec![1.0]).unwrap();
        let res = exact_knn(&base, &q, 4, false);
        assert_eq!(res[0].ids, vec![0, 2, 3, 1]);
    }
}
