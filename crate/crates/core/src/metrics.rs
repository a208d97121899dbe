//! Recall@k, throughput and index footprint.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{NeighborList, VectorSet};
use crate::entrypoint::EntryPointSelector;
use crate::error::{Error, Result};
use crate::graph::GraphIndex;
use crate::pca::PcaModel;

/// Number of timed repetitions used when none is configured.
pub const DEFAULT_REPEATS: usize = 10;

/// Result of one benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub recall_at_k: f64,
    pub qps: f64,
    pub memory_bytes: u64,
    pub repeats: usize,
    pub k: usize,
}

/// Mean over queries of `|R ∩ R̂| / k`, using the first `k` ids of each list.
pub fn recall_at_k(ground_truth: &[NeighborList], results: &[NeighborList], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if ground_truth.len() != results.len() {
        return Err(Error::arg(format!(
            "ground truth has {} queries but results have {}",
            ground_truth.len(),
            results.len()
        )));
    }
    if ground_truth.is_empty() {
        return Err(Error::arg("no queries"));
    }
    let mut hits = 0usize;
    for (qi, (gt, res)) in ground_truth.iter().zip(results).enumerate() {
        if gt.len() < k || res.len() < k {
            return Err(Error::arg(format!(
                "query {qi} has fewer than k={k} entries (truth {}, result {})",
                gt.len(),
                res.len()
            )));
        }
        let truth: HashSet<u32> = gt.ids[..k].iter().copied().collect();
        hits += res.ids[..k].iter().filter(|id| truth.contains(id)).count();
    }
    Ok(hits as f64 / (k * ground_truth.len()) as f64)
}

/// Queries per second of `search` over the whole batch.
///
/// One untimed warm-up pass, then `repeats` timed passes; the result is
/// `repeats * queries.count()` divided by the total timed seconds.
pub fn measure_qps<T, F>(mut search: F, queries: &VectorSet, repeats: usize) -> Result<f64>
where
    F: FnMut(&VectorSet) -> Result<T>,
{
    if repeats == 0 {
        return Err(Error::arg("repeats must be at least 1"));
    }
    if queries.count() == 0 {
        return Err(Error::arg("cannot measure QPS over zero queries"));
    }
    std::hint::black_box(search(queries)?);
    let start = Instant::now();
    for _ in 0..repeats {
        std::hint::black_box(search(queries)?);
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok(qps_from_timing(queries.count(), repeats, secs))
}

/// `(repeats × queries) / seconds`.
pub fn qps_from_timing(queries: usize, repeats: usize, seconds: f64) -> f64 {
    (repeats * queries) as f64 / seconds
}

/// Fixed bytes charged for the index header.
pub const INDEX_HEADER_BYTES: u64 = 32;
/// Fixed bytes charged for the PCA section header.
pub const PCA_HEADER_BYTES: u64 = 16;
/// Fixed bytes charged for the entry-point selector header.
pub const SELECTOR_HEADER_BYTES: u64 = 16;

/// Analytic search-time footprint in bytes:
///
/// ```text
/// index    = 32 + count*dim*4 + (ids ? count*4 : 0) + (count+1)*8 + edges*4
/// pca      = 16 + (d0 + d0*d)*4
/// selector = 16 + clusters*dim*4 + clusters*4
/// ```
///
/// Eigenvalues are not charged; only the mean and basis are needed to
/// transform queries.
pub fn memory_estimate(
    index: &GraphIndex,
    pca: Option<&PcaModel>,
    selector: Option<&EntryPointSelector>,
) -> u64 {
    let base = index.base();
    let count = base.count() as u64;
    let dim = base.dim() as u64;
    let mut bytes = INDEX_HEADER_BYTES + count * dim * 4 + (count + 1) * 8 + index.edge_count() as u64 * 4;
    if base.ids().is_some() {
        bytes += count * 4;
    }
    if let Some(p) = pca {
        bytes += pca_bytes(p.source_dim() as u64, p.target_dim() as u64);
    }
    if let Some(s) = selector {
        bytes += selector_bytes(s.num_clusters() as u64, s.dim() as u64);
    }
    bytes
}

fn pca_bytes(d0: u64, d: u64) -> u64 {
    PCA_HEADER_BYTES + (d0 + d0 * d) * 4
}

fn selector_bytes(clusters: u64, dim: u64) -> u64 {
    SELECTOR_HEADER_BYTES + clusters * dim * 4 + clusters * 4
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn list(ids: &[u32]) -> NeighborList {
        NeighborList {
            ids: ids.to_vec(),
            distances: (0..ids.len()).map(|i| i as f32).collect(),
        }
    }

    #[test]
    fn recall_identity_and_disjoint() {
        let gt = vec![list(&[1, 2, 3]), list(&[4, 5, 6])];
        assert_eq!(recall_at_k(&gt, &gt, 3).unwrap(), 1.0);
        let other = vec![list(&[7, 8, 9]), list(&[10, 11, 12])];
        assert_eq!(recall_at_k(&gt, &other, 3).unwrap(), 0.0);
    }

    #[test]
    fn recall_nine_of_ten() {
        let gt: Vec<_> = (0..5).map(|q| list(&(q * 100..q * 100 + 10).collect::<Vec<_>>())).collect();
        let res: Vec<_> = (0..5)
            .map(|q| {
                let mut ids: Vec<u32> = (q * 100..q * 100 + 9).collect();
                ids.push(9999);
                list(&ids)
            })
            .collect();
        assert!((recall_at_k(&gt, &res, 10).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn recall_errors() {
        let gt = vec![list(&[1, 2])];
        assert!(recall_at_k(&gt, &[], 2).is_err());
        assert!(recall_at_k(&gt, &gt, 3).is_err());
        assert!(recall_at_k(&gt, &gt, 0).is_err());
    }

    #[test]
    fn qps_formula() {
        assert_eq!(qps_from_timing(1000, 1, 0.5), 2000.0);
        assert_eq!(DEFAULT_REPEATS, 10);
    }

    #[test]
    fn qps_rejects_empty() {
        let q = VectorSet::empty();
        assert!(measure_qps(|_| Ok(()), &q, 1).is_err());
        let q = VectorSet::new(1, vec![0.0]).unwrap();
        assert!(measure_qps(|_| Ok(()), &q, 0).is_err());
    }

    #[test]
    fn qps_excludes_warmup() {
        let q = VectorSet::new(1, vec![0.0; 100]).unwrap();
        let mut calls = 0;
        measure_qps(
            |_| {
                calls += 1;
                if calls == 1 {
                    std::thread::sleep(Duration::from_millis(200));
                }
                Ok(())
            },
            &q,
            2,
        )
        .map(|qps| assert!(qps > 100.0 / 0.05, "warm-up leaked into timing: {qps}"))
        .unwrap();
        assert_eq!(calls, 3);
    }
}
