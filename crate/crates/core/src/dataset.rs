//! Dense vector storage, `fvecs` I/O, synthetic data and exact k-NN.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn;

/// Row-major matrix of `f32` vectors.
///
/// When the set is a subsample of a larger database, `ids` maps each row back
/// to its id in the original database.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    count: usize,
    dim: usize,
    values: Vec<f32>,
    ids: Option<Vec<u32>>,
}

impl VectorSet {
    /// Builds a set from row-major values. `values.len()` must be a multiple
    /// of `dim` and every value must be finite.
    pub fn new(dim: usize, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !values.is_empty() {
                return Err(Error::arg("dim is 0 but values are non-empty"));
            }
            return Ok(Self::empty());
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "values length {} is not a multiple of dim {}",
                values.len(),
                dim
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::arg(format!(
                "non-finite value at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            count: values.len() / dim,
            dim,
            values,
            ids: None,
        })
    }

    /// The empty set (`count = 0`, `dim = 0`).
    pub fn empty() -> Self {
        Self {
            count: 0,
            dim: 0,
            values: Vec::new(),
            ids: None,
        }
    }

    /// Attaches original-database ids. They must be distinct and one per row.
    pub fn with_ids(mut self, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != self.count {
            return Err(Error::arg(format!(
                "ids length {} does not match count {}",
                ids.len(),
                self.count
            )));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::arg("ids are not distinct"));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn ids(&self) -> Option<&[u32]> {
        self.ids.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        let dim = self.dim.max(1);
        self.values.chunks_exact(dim)
    }

    /// Id of row `i` in the original database.
    #[inline]
    pub fn original_id(&self, i: usize) -> u32 {
        match &self.ids {
            Some(ids) => ids[i],
            None => i as u32,
        }
    }

    /// Copies the given rows (in the given order) into a new set. The result
    /// carries original ids so it can be mapped back to this set's origin.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.count {
                return Err(Error::arg(format!(
                    "row {} out of range (count {})",
                    r, self.count
                )));
            }
            values.extend_from_slice(self.row(r));
            ids.push(self.original_id(r));
        }
        let out = if rows.is_empty() {
            Self {
                count: 0,
                dim: self.dim,
                values,
                ids: None,
            }
        } else {
            Self::new(self.dim, values)?
        };
        out.with_ids(ids)
    }

    /// Replaces the values while keeping the ids. Used by transforms that
    /// change dimension row by row.
    pub(crate) fn from_parts(dim: usize, values: Vec<f32>, ids: Option<Vec<u32>>) -> Result<Self> {
        let mut out = Self::new(dim, values)?;
        if let Some(ids) = ids {
            if ids.len() != out.count {
                return Err(Error::arg("ids length does not match count"));
            }
            out.ids = Some(ids);
        }
        Ok(out)
    }

    pub(crate) fn into_parts(self) -> (usize, Vec<f32>, Option<Vec<u32>>) {
        (self.dim, self.values, self.ids)
    }
}

/// The `k` nearest neighbors of one query, ascending by `(distance, id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    pub ids: Vec<u32>,
    pub distances: Vec<f32>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a list from `(distance, id)` pairs already sorted.
    pub(crate) fn from_sorted(pairs: impl IntoIterator<Item = (f32, u32)>) -> Self {
        let (distances, ids) = pairs.into_iter().unzip();
        Self { ids, distances }
    }
}

/// Reads an `fvecs` file: each record is a little-endian `i32` dimension
/// followed by that many little-endian `f32` values.
pub fn load_fvecs(path: impl AsRef<Path>) -> Result<VectorSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_fvecs(&bytes)
}

/// Decodes `fvecs` bytes. Record numbers in errors are 1-based.
pub fn parse_fvecs(bytes: &[u8]) -> Result<VectorSet> {
    if bytes.is_empty() {
        return Ok(VectorSet::empty());
    }
    let mut dim: Option<usize> = None;
    let mut values = Vec::new();
    let mut offset = 0usize;
    let mut record = 0usize;
    while offset < bytes.len() {
        record += 1;
        let Some(head) = bytes.get(offset..offset + 4) else {
            return Err(Error::FormatAtOffset {
                offset: offset as u64,
                message: format!(
                    "truncated dimension header ({} trailing bytes)",
                    bytes.len() - offset
                ),
            });
        };
        let declared = i32::from_le_bytes(head.try_into().unwrap());
        if declared <= 0 {
            return Err(Error::FormatAtOffset {
                offset: offset as u64,
                message: format!("non-positive dimension {declared}"),
            });
        }
        let d = declared as usize;
        match dim {
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(Error::FormatAtRecord {
                    record,
                    message: format!("dimension {d} differs from first record's {expected}"),
                });
            }
            Some(_) => {}
        }
        let start = offset + 4;
        let end = start + d * 4;
        let Some(payload) = bytes.get(start..end) else {
            return Err(Error::FormatAtOffset {
                offset: offset as u64,
                message: format!(
                    "record declares {} floats but only {} bytes remain",
                    d,
                    bytes.len() - start
                ),
            });
        };
        values.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
        offset = end;
    }
    VectorSet::new(dim.unwrap_or(0), values).map_err(|e| Error::FormatAtRecord {
        record: 0,
        message: e.to_string(),
    })
}

/// Writes `vs` as `fvecs`. An empty set produces an empty file.
pub fn save_fvecs(vs: &VectorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_fvecs(vs, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_fvecs(vs: &VectorSet, w: &mut impl Write) -> std::io::Result<()> {
    let dim = (vs.dim() as i32).to_le_bytes();
    for row in vs.rows() {
        w.write_all(&dim)?;
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Spread of blob means along every axis, in units of the leading axis'
/// within-blob standard deviation.
const BLOB_SPREAD: f64 = 4.0;

/// Gaussian mixture with `num_blobs` blobs sharing one diagonal covariance.
///
/// Axis `j` has within-blob variance `anisotropy^j`, so `anisotropy = 1`
/// is isotropic and smaller values concentrate variance in the leading axes.
/// Row `i` belongs to blob `i % num_blobs`; blob means are uniform in
/// `[-4, 4]^dim`.
pub fn generate_synthetic(
    n: usize,
    dim: usize,
    num_blobs: usize,
    anisotropy: f64,
    seed: u64,
) -> Result<VectorSet> {
    if num_blobs == 0 || n < num_blobs {
        return Err(Error::arg(format!(
            "need n >= num_blobs >= 1, got n={n} num_blobs={num_blobs}"
        )));
    }
    if dim == 0 {
        return Err(Error::arg("dim must be positive"));
    }
    if !(0.0..=1.0).contains(&anisotropy) {
        return Err(Error::arg(format!("anisotropy {anisotropy} not in [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stddev: Vec<f64> = (0..dim)
        .map(|j| anisotropy.powf(j as f64).sqrt())
        .collect();
    let means: Vec<f64> = (0..num_blobs * dim)
        .map(|_| rng.random_range(-BLOB_SPREAD..=BLOB_SPREAD))
        .collect();
    let mut values = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mean = &means[(i % num_blobs) * dim..][..dim];
        for j in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            values.push((mean[j] + z * stddev[j]) as f32);
        }
    }
    VectorSet::new(dim, values)
}

/// A database of `n` rows and `num_queries` queries drawn from the same
/// mixture: one [`generate_synthetic`] draw split at row `n`.
pub fn generate_with_queries(
    n: usize,
    num_queries: usize,
    dim: usize,
    num_blobs: usize,
    anisotropy: f64,
    seed: u64,
) -> Result<(VectorSet, VectorSet)> {
    if n < num_blobs {
        return Err(Error::arg(format!(
            "need n >= num_blobs >= 1, got n={n} num_blobs={num_blobs}"
        )));
    }
    let all = generate_synthetic(n + num_queries, dim, num_blobs, anisotropy, seed)?;
    let (dim, mut values, _) = all.into_parts();
    let tail = values.split_off(n * dim);
    Ok((VectorSet::new(dim, values)?, VectorSet::new(dim, tail)?))
}

/// Exact k nearest neighbors of each query by squared L2, ties broken by
/// ascending id. Ids are row positions in `base`.
pub fn brute_force_knn(base: &VectorSet, queries: &VectorSet, k: usize) -> Result<Vec<NeighborList>> {
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if k > base.count() {
        return Err(Error::arg(format!(
            "k={} exceeds database size {}",
            k,
            base.count()
        )));
    }
    if queries.count() > 0 && base.dim() != queries.dim() {
        return Err(Error::arg(format!(
            "dimension mismatch: base {} vs queries {}",
            base.dim(),
            queries.dim()
        )));
    }
    Ok(knn::exact_knn(base, queries, k, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(records: &[(i32, &[f32])]) -> Vec<u8> {
        let mut out = Vec::new();
        for (d, vals) in records {
            out.extend_from_slice(&d.to_le_bytes());
            for v in *vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    #[test]
    fn decodes_two_records() {
        let bytes = encode(&[(2, &[1.0, 2.0]), (2, &[3.0, 4.0])]);
        let vs = parse_fvecs(&bytes).unwrap();
        assert_eq!(vs.count(), 2);
        assert_eq!(vs.dim(), 2);
        assert_eq!(vs.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_file_is_empty_set() {
        let vs = parse_fvecs(&[]).unwrap();
        assert_eq!((vs.count(), vs.dim()), (0, 0));
    }

    #[test]
    fn inconsistent_dim_names_record() {
        let bytes = encode(&[
            (2, &[1.0, 2.0]),
            (2, &[3.0, 4.0]),
            (4, &[1.0, 2.0, 3.0, 4.0]),
        ]);
        match parse_fvecs(&bytes) {
            Err(Error::FormatAtRecord { record, .. }) => assert_eq!(record, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_record_names_offset() {
        let mut bytes = encode(&[(2, &[1.0, 2.0]), (2, &[3.0, 4.0])]);
        bytes.truncate(bytes.len() - 2);
        match parse_fvecs(&bytes) {
            Err(Error::FormatAtOffset { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
        let mut bytes = encode(&[(2, &[1.0, 2.0])]);
        bytes.extend_from_slice(&[1, 0]);
        match parse_fvecs(&bytes) {
            Err(Error::FormatAtOffset { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.fvecs");
        let vs = VectorSet::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        save_fvecs(&vs, &path).unwrap();
        assert_eq!(load_fvecs(&path).unwrap(), vs);

        let empty = VectorSet::empty();
        save_fvecs(&empty, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 0);
        assert_eq!(load_fvecs(&path).unwrap(), empty);
    }

    #[test]
    fn round_trip_random_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.fvecs");
        let vs = generate_synthetic(1000, 12, 3, 0.7, 99).unwrap();
        save_fvecs(&vs, &path).unwrap();
        let back = load_fvecs(&path).unwrap();
        let a: Vec<u32> = vs.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_fvecs("/nonexistent/x.fvecs").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.fvecs"));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(VectorSet::new(2, vec![1.0, f32::NAN]).is_err());
        assert!(VectorSet::new(2, vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ids_must_be_distinct() {
        let vs = VectorSet::new(1, vec![0.0, 1.0]).unwrap();
        assert!(vs.clone().with_ids(vec![3, 3]).is_err());
        assert!(vs.with_ids(vec![3, 7]).is_ok());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(10, 2, 1, 0.0, 7).unwrap();
        let b = generate_synthetic(10, 2, 1, 0.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(3, 2, 4, 0.5, 1).is_err());
        assert!(generate_synthetic(3, 2, 0, 0.5, 1).is_err());
        assert!(generate_synthetic(3, 2, 1, 1.5, 1).is_err());
    }

    #[test]
    fn synthetic_isotropic_variances() {
        let vs = generate_synthetic(20_000, 4, 1, 1.0, 3).unwrap();
        let n = vs.count() as f64;
        let mut vars = Vec::new();
        for j in 0..4 {
            let col: Vec<f64> = vs.rows().map(|r| r[j] as f64).collect();
            let m = col.iter().sum::<f64>() / n;
            vars.push(col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0));
        }
        let max = vars.iter().cloned().fold(f64::MIN, f64::max);
        let min = vars.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max / min < 2.0, "{vars:?}");
    }

    #[test]
    fn brute_force_hand_example() {
        let base = VectorSet::new(2, vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
        let q = VectorSet::new(2, vec![0.9, 0.0]).unwrap();
        let res = brute_force_knn(&base, &q, 2).unwrap();
        assert_eq!(res[0].ids, vec![1, 0]);
        assert!((res[0].distances[0] - 0.01).abs() < 1e-6);
        assert!((res[0].distances[1] - 0.81).abs() < 1e-6);
    }

    #[test]
    fn brute_force_identity_and_errors() {
        let base = generate_synthetic(50, 6, 2, 0.8, 5).unwrap();
        let q = base.select_rows(&[5]).unwrap();
        let res = brute_force_knn(&base, &q, 1).unwrap();
        assert_eq!(res[0].ids, vec![5]);
        assert_eq!(res[0].distances, vec![0.0]);
        assert!(brute_force_knn(&base, &q, 51).is_err());
        assert!(brute_force_knn(&base, &q, 0).is_err());
        let other = VectorSet::new(3, vec![0.0; 3]).unwrap();
        assert!(brute_force_knn(&base, &other, 1).is_err());
    }
}
