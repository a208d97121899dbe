//! Squared Euclidean distance.
//!
//! Every component of the crate uses [`squared_l2`] as the single definition
//! of distance, so results from brute force, graph search and k-means are
//! directly comparable bit for bit.

const LANES: usize = 8;

/// Squared L2 distance between two equal-length slices.
///
/// Accumulates in eight independent lanes so the loop vectorizes; the lane
/// order is fixed, which keeps the result deterministic.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f32; LANES];
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared norm of a vector, with the same lane layout as [`squared_l2`].
#[inline]
pub fn squared_norm(a: &[f32]) -> f32 {
    let ca = a.chunks_exact(LANES);
    let ra = ca.remainder();
    let mut acc = [0.0f32; LANES];
    for x in ca {
        for i in 0..LANES {
            acc[i] += x[i] * x[i];
        }
    }
    let tail: f32 = ra.iter().map(|x| x * x).sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
