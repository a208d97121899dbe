//! Approximate k-NN graph by NN-descent (local joins over neighbors and
//! reverse neighbors). Used for the graph build above the exact-k-NN size
//! limit.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::VectorSet;
use crate::distance::squared_l2;

const MAX_ITERS: usize = 15;
const STOP_FRACTION: f64 = 0.001;

#[derive(Clone, Copy)]
struct Entry {
    dist: f32,
    id: u32,
    fresh: bool,
}

fn before(a: &Entry, dist: f32, id: u32) -> bool {
    a.dist < dist || (a.dist == dist && a.id < id)
}

/// Tries to insert `id` into a sorted list bounded to `k`; returns whether
/// the list changed.
fn update(list: &mut Vec<Entry>, k: usize, dist: f32, id: u32) -> bool {
    if list.len() == k {
        let worst = list[k - 1];
        if !before(&Entry { dist, id, fresh: true }, worst.dist, worst.id) {
            return false;
        }
    }
    if list.iter().any(|e| e.id == id) {
        return false;
    }
    let pos = list.partition_point(|e| before(e, dist, id));
    list.insert(pos, Entry { dist, id, fresh: true });
    list.truncate(k);
    true
}

/// `k` approximate nearest neighbors of every point (self excluded), each
/// list sorted by `(distance, id)`. Deterministic for a fixed seed.
pub(crate) fn knn_graph(base: &VectorSet, k: usize, seed: u64) -> Vec<Vec<(f32, u32)>> {
    let n = base.count();
    let k = k.min(n.saturating_sub(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists: Vec<Vec<Entry>> = (0..n)
        .map(|v| {
            let mut list = Vec::with_capacity(k + 1);
            for other in sample(&mut rng, n - 1, k).into_iter() {
                let u = if other >= v { other + 1 } else { other } as u32;
                let d = squared_l2(base.row(v), base.row(u as usize));
                update(&mut list, k, d, u);
            }
            list
        })
        .collect();

    for _ in 0..MAX_ITERS {
        let mut fresh: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut stale: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (v, list) in lists.iter_mut().enumerate() {
            for e in list.iter_mut() {
                if e.fresh {
                    fresh[v].push(e.id);
                    e.fresh = false;
                } else {
                    stale[v].push(e.id);
                }
            }
        }
        let mut rev_fresh: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut rev_stale: Vec<Vec<u32>> = vec![Vec::new(); n];
        for v in 0..n {
            for &u in &fresh[v] {
                if rev_fresh[u as usize].len() < k {
                    rev_fresh[u as usize].push(v as u32);
                }
            }
            for &u in &stale[v] {
                if rev_stale[u as usize].len() < k {
                    rev_stale[u as usize].push(v as u32);
                }
            }
        }

        let mut changes = 0usize;
        for v in 0..n {
            let mut new_ids = std::mem::take(&mut fresh[v]);
            new_ids.extend_from_slice(&rev_fresh[v]);
            new_ids.sort_unstable();
            new_ids.dedup();
            let mut old_ids = std::mem::take(&mut stale[v]);
            old_ids.extend_from_slice(&rev_stale[v]);
            old_ids.sort_unstable();
            old_ids.dedup();

            for (i, &a) in new_ids.iter().enumerate() {
                for &b in new_ids[i + 1..].iter().chain(old_ids.iter()) {
                    if a == b {
                        continue;
                    }
                    let d = squared_l2(base.row(a as usize), base.row(b as usize));
                    changes += update(&mut lists[a as usize], k, d, b) as usize;
                    changes += update(&mut lists[b as usize], k, d, a) as usize;
                }
            }
        }
        if (changes as f64) < STOP_FRACTION * (n * k) as f64 {
            break;
        }
    }

    lists
        .into_iter()
        .map(|l| l.into_iter().map(|e| (e.dist, e.id)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::knn::exact_knn;

    #[test]
    fn high_graph_recall() {
        let base = generate_synthetic(2000, 8, 4, 0.8, 1).unwrap();
        let approx = knn_graph(&base, 10, 3);
        let exact = exact_knn(&base, &base, 10, true);
        let mut hits = 0;
        for (a, e) in approx.iter().zip(&exact) {
            assert_eq!(a.len(), 10);
            hits += a.iter().filter(|(_, id)| e.ids.contains(id)).count();
        }
        let recall = hits as f64 / (2000.0 * 10.0);
        assert!(recall > 0.9, "k-NN graph recall {recall}");
        assert_eq!(knn_graph(&base, 10, 3), approx);
    }
}
