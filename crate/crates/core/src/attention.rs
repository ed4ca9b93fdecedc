//! Reference quadratic self-attention, used only as a scaling baseline.
//!
//! The frequency-filter layer claims near-linear growth in sequence length;
//! benchmarks need something honest to compare against, so this is the
//! textbook single-head kernel — scores = XXᵀ/√d, row softmax, then
//! re-mixing the rows — deliberately unoptimized beyond O(L²d) arithmetic.

use crate::tensor::{matmul, matmul_nt, Tensor};

/// Single-head self-attention of a sequence with itself (queries, keys, and
/// values all equal the input rows). Returns an L×d matrix.
pub fn attention_reference(x: &Tensor) -> Tensor {
    let (l, d) = x.shape();
    assert!(d > 0, "attention needs a positive width");
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = matmul_nt(x, x);
    for row in 0..l {
        let r = &mut scores.data_mut()[row * l..(row + 1) * l];
        let mut max = f64::NEG_INFINITY;
        for &v in r.iter() {
            max = max.max(v * scale);
        }
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v * scale - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    matmul(&scores, x)
}
