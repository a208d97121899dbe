//! Principal component analysis via eigendecomposition of the sample
//! covariance.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::VectorSet;
use crate::error::{Error, Result};

const ROW_CHUNK: usize = 4096;

/// Fitted projection from `d0` to `d` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    mean: Vec<f32>,
    /// Row-major `d0 × d`; column `c` is the `c`-th principal direction.
    basis: Vec<f32>,
    /// Variances along the kept directions, non-increasing.
    eigenvalues: Vec<f64>,
    /// Sum of the per-axis sample variances of the fitted data.
    total_variance: f64,
    d0: usize,
    d: usize,
}

impl PcaModel {
    pub fn source_dim(&self) -> usize {
        self.d0
    }

    pub fn target_dim(&self) -> usize {
        self.d
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Column `c` of the basis.
    pub fn component(&self, c: usize) -> Vec<f32> {
        (0..self.d0).map(|i| self.basis[i * self.d + c]).collect()
    }

    /// Reassembles a model from persisted parts.
    pub fn from_parts(
        d0: usize,
        d: usize,
        mean: Vec<f32>,
        basis: Vec<f32>,
        eigenvalues: Vec<f64>,
        total_variance: f64,
    ) -> Result<Self> {
        if d == 0 || d > d0 {
            return Err(Error::arg(format!("target dim {d} not in [1, {d0}]")));
        }
        if mean.len() != d0 || basis.len() != d0 * d || eigenvalues.len() != d {
            return Err(Error::arg("PCA part lengths do not match dimensions"));
        }
        Ok(Self {
            mean,
            basis,
            eigenvalues,
            total_variance,
            d0,
            d,
        })
    }
}

/// Fits a `d`-component PCA on `base`.
///
/// Each basis column is sign-normalized so that its largest-magnitude entry
/// (first one on ties) is non-negative. Rank-deficient data yields zero
/// trailing eigenvalues.
pub fn pca_fit(base: &VectorSet, d: usize) -> Result<PcaModel> {
    let d0 = base.dim();
    let n = base.count();
    if n < 2 {
        return Err(Error::arg(format!("PCA needs at least 2 vectors, got {n}")));
    }
    if d == 0 || d > d0 {
        return Err(Error::arg(format!("target dim {d} not in [1, {d0}]")));
    }

    let mut mean = vec![0.0f64; d0];
    for row in base.rows() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    // scatter = Σ (x - μ)(x - μ)ᵀ, accumulated chunk by chunk
    let mut scatter = vec![0.0f64; d0 * d0];
    let mut chunk = Vec::with_capacity(ROW_CHUNK * d0);
    for rows in base.values().chunks(ROW_CHUNK * d0) {
        chunk.clear();
        for row in rows.chunks_exact(d0) {
            chunk.extend(row.iter().zip(&mean).map(|(&v, m)| v as f64 - m));
        }
        let m = chunk.len() / d0;
        unsafe {
            matrixmultiply::dgemm(
                d0,
                m,
                d0,
                1.0,
                chunk.as_ptr(),
                1,
                d0 as isize,
                chunk.as_ptr(),
                d0 as isize,
                1,
                1.0,
                scatter.as_mut_ptr(),
                d0 as isize,
                1,
            );
        }
    }
    let denom = (n - 1) as f64;
    let mut cov = DMatrix::<f64>::from_row_slice(d0, d0, &scatter) / denom;
    // symmetrize away accumulation asymmetry
    for i in 0..d0 {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d0).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut basis = vec![0.0f32; d0 * d];
    let mut eigenvalues = Vec::with_capacity(d);
    for (c, &src) in order.iter().take(d).enumerate() {
        let col = eig.eigenvectors.column(src);
        let mut pivot = 0;
        for i in 1..d0 {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for i in 0..d0 {
            basis[i * d + c] = (sign * col[i] / norm) as f32;
        }
        eigenvalues.push(eig.eigenvalues[src].max(0.0));
    }

    Ok(PcaModel {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        basis,
        eigenvalues,
        total_variance,
        d0,
        d,
    })
}

/// Projects every row: `basisᵀ (x - mean)`. Ids are carried through.
pub fn pca_transform(model: &PcaModel, vs: &VectorSet) -> Result<VectorSet> {
    if vs.count() > 0 && vs.dim() != model.d0 {
        return Err(Error::arg(format!(
            "PCA expects dimension {}, got {}",
            model.d0,
            vs.dim()
        )));
    }
    let (d0, d) = (model.d0, model.d);
    let mut out = vec![0.0f32; vs.count() * d];
    let mut centered = Vec::with_capacity(ROW_CHUNK * d0);
    for (ci, rows) in vs.values().chunks(ROW_CHUNK * d0.max(1)).enumerate() {
        centered.clear();
        for row in rows.chunks_exact(d0) {
            centered.extend(row.iter().zip(&model.mean).map(|(v, m)| v - m));
        }
        let m = centered.len() / d0;
        let dst = &mut out[ci * ROW_CHUNK * d..][..m * d];
        unsafe {
            matrixmultiply::sgemm(
                m,
                d0,
                d,
                1.0,
                centered.as_ptr(),
                d0 as isize,
                1,
                model.basis.as_ptr(),
                d as isize,
                1,
                0.0,
                dst.as_mut_ptr(),
                d as isize,
                1,
            );
        }
    }
    let ids = vs.ids().map(|ids| ids.to_vec());
    VectorSet::from_parts(d, out, ids)
}

/// Projects a single vector.
pub fn pca_transform_one(model: &PcaModel, x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; model.d];
    for (i, (&v, &m)) in x.iter().zip(&model.mean).enumerate() {
        let c = v - m;
        let row = &model.basis[i * model.d..(i + 1) * model.d];
        for (o, &b) in out.iter_mut().zip(row) {
            *o += c * b;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::squared_l2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn line_through_origin() {
        let mut vals = Vec::new();
        for t in -5..=5 {
            vals.push(t as f32);
            vals.push(2.0 * t as f32);
        }
        let vs = VectorSet::new(2, vals).unwrap();
        let m = pca_fit(&vs, 2).unwrap();
        let c0 = m.component(0);
        let s5 = 5f32.sqrt();
        assert!((c0[0] - 1.0 / s5).abs() < 1e-6 && (c0[1] - 2.0 / s5).abs() < 1e-6, "{c0:?}");
        assert!(m.eigenvalues()[1].abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_target() {
        let vs = VectorSet::new(2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(pca_fit(&vs, 0).is_err());
        assert!(pca_fit(&vs, 3).is_err());
        let one = VectorSet::new(2, vec![0.0, 1.0]).unwrap();
        assert!(pca_fit(&one, 1).is_err());
    }

    #[test]
    fn mean_maps_to_zero() {
        let vs = crate::dataset::generate_synthetic(200, 6, 3, 0.7, 4).unwrap();
        let m = pca_fit(&vs, 3).unwrap();
        let mv = VectorSet::new(6, m.mean().to_vec()).unwrap();
        let t = pca_transform(&m, &mv).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.0));
        assert!(pca_transform(&m, &VectorSet::new(3, vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn orthonormal_and_sorted() {
        let vs = crate::dataset::generate_synthetic(500, 10, 4, 0.8, 9).unwrap();
        let m = pca_fit(&vs, 7).unwrap();
        for a in 0..7 {
            let ca = m.component(a);
            for b in 0..7 {
                let cb = m.component(b);
                let dot: f32 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6, "{a},{b}: {dot}");
            }
            let pivot = ca.iter().cloned().fold(0.0f32, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(pivot >= 0.0);
        }
        assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(pca_fit(&vs, 7).unwrap(), m);
    }

    #[test]
    fn single_row_transform_matches_batch() {
        let vs = crate::dataset::generate_synthetic(300, 9, 2, 0.9, 2).unwrap();
        let m = pca_fit(&vs, 4).unwrap();
        let t = pca_transform(&m, &vs).unwrap();
        for i in [0, 17, 299] {
            let one = pca_transform_one(&m, vs.row(i));
            assert!(squared_l2(&one, t.row(i)) < 1e-8);
        }
    }

    #[test]
    fn ids_carried_through() {
        let vs = crate::dataset::generate_synthetic(20, 3, 1, 1.0, 1).unwrap();
        let sub = vs.select_rows(&[3, 9, 12, 4]).unwrap();
        let m = pca_fit(&sub, 2).unwrap();
        let t = pca_transform(&m, &sub).unwrap();
        assert_eq!(t.ids(), Some(&[3u32, 9, 12, 4][..]));
    }

    #[test]
    fn projection_is_non_expansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f32> = (0..100 * 12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let vs = VectorSet::new(12, vals).unwrap();
        let m = pca_fit(&vs, 5).unwrap();
        let t = pca_transform(&m, &vs).unwrap();
        for i in 0..100 {
            for j in 0..100 {
                assert!(squared_l2(t.row(i), t.row(j)) <= squared_l2(vs.row(i), vs.row(j)) + 1e-4);
            }
        }
    }
}
