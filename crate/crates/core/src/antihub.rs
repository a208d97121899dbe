//! Hubness-based database subsampling.
//!
//! The k-occurrence `N_k(x)` counts how many other points list `x` among
//! their `k` nearest neighbors. Points with the lowest counts (antihubs) are
//! rarely anyone's neighbor and are removed first.

use serde::{Deserialize, Serialize};

use crate::dataset::VectorSet;
use crate::error::{Error, Result};
use crate::knn;

/// Default neighborhood size for the k-occurrence profile.
pub const DEFAULT_K_HUB: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubnessProfile {
    pub counts: Vec<u32>,
    pub k_hub: usize,
}

/// Exact k-occurrence of every point, self excluded.
pub fn k_occurrence(base: &VectorSet, k_hub: usize) -> Result<HubnessProfile> {
    if k_hub == 0 || k_hub >= base.count() {
        return Err(Error::arg(format!(
            "k_hub must be in [1, count), got {k_hub} with count {}",
            base.count()
        )));
    }
    let lists = knn::exact_knn(base, base, k_hub, true);
    let mut counts = vec![0u32; base.count()];
    for list in &lists {
        for &id in &list.ids {
            counts[id as usize] += 1;
        }
    }
    Ok(HubnessProfile { counts, k_hub })
}

/// Rows kept by [`antihub_subsample`], in ascending row order.
pub fn antihub_keep(profile: &HubnessProfile, alpha: f64) -> Result<Vec<usize>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::arg(format!("alpha {alpha} not in (0, 1]")));
    }
    let n = profile.counts.len();
    let keep = ((alpha * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| profile.counts[b].cmp(&profile.counts[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

/// Keeps the `⌈alpha·N⌉` points with the largest k-occurrence (ties: lower
/// id first). Kept rows stay in their original order and carry their
/// original ids.
pub fn antihub_subsample(base: &VectorSet, profile: &HubnessProfile, alpha: f64) -> Result<VectorSet> {
    if profile.counts.len() != base.count() {
        return Err(Error::arg(format!(
            "profile covers {} points but base has {}",
            profile.counts.len(),
            base.count()
        )));
    }
    let rows = antihub_keep(profile, alpha)?;
    base.select_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> VectorSet {
        VectorSet::new(1, vec![0.0, 1.0, 3.0]).unwrap()
    }

    #[test]
    fn hand_example() {
        let p = k_occurrence(&line(), 1).unwrap();
        assert_eq!(p.counts, vec![1, 2, 0]);
        let kept = antihub_subsample(&line(), &p, 2.0 / 3.0).unwrap();
        assert_eq!(kept.ids(), Some(&[0u32, 1][..]));
        assert_eq!(kept.values(), &[0.0, 1.0]);
    }

    #[test]
    fn alpha_one_is_identity() {
        let base = crate::dataset::generate_synthetic(40, 3, 2, 0.5, 1).unwrap();
        let p = k_occurrence(&base, 5).unwrap();
        let all = antihub_subsample(&base, &p, 1.0).unwrap();
        assert_eq!(all.values(), base.values());
        assert_eq!(all.ids().unwrap(), (0..40).collect::<Vec<u32>>().as_slice());
    }

    #[test]
    fn argument_errors() {
        let p = k_occurrence(&line(), 1).unwrap();
        assert!(antihub_subsample(&line(), &p, 0.0).is_err());
        assert!(antihub_subsample(&line(), &p, 1.01).is_err());
        assert!(antihub_subsample(&line(), &p, f64::NAN).is_err());
        assert!(k_occurrence(&line(), 3).is_err());
        assert!(k_occurrence(&line(), 0).is_err());
    }

    #[test]
    fn counts_sum_to_votes() {
        let base = crate::dataset::generate_synthetic(300, 5, 3, 0.6, 8).unwrap();
        let p = k_occurrence(&base, 7).unwrap();
        assert_eq!(p.counts.iter().map(|&c| c as usize).sum::<usize>(), 7 * 300);
        assert!(p.counts.iter().all(|&c| (c as usize) < 300));
    }
}
