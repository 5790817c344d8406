//! Scaled dot-product attention with post-softmax soft masking.
//!
//! The mask multiplies the softmax weights entrywise and every row is then
//! renormalized to sum to one. With a binary mask holding a single 1 per row
//! the renormalized weights are exactly that mask, so the output is
//! `mask · value` whatever the queries and keys are.

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::matrix::DenseMatrix;

/// Rows of `softmax ⊙ mask` summing below this are rejected.
pub const DEGENERATE_ROW_THRESHOLD: f64 = 1e-12;

pub fn softmax_rows(m: &DenseMatrix) -> DenseMatrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Renormalized attention weights `A / (A 1 1ᵀ)` with `A = softmax(q kᵀ/√d) ⊙ mask`.
pub fn masked_weights(q: &DenseMatrix, k: &DenseMatrix, mask: &AttentionMask) -> Result<DenseMatrix> {
    if q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} differs from key dim {}",
            q.cols(),
            k.cols()
        )));
    }
    if mask.matrix().shape() != (q.rows(), k.rows()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} for {} queries and {} keys",
            mask.matrix().shape(),
            q.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut weights = q.matmul_bt(k)?.scale(scale);
    for i in 0..weights.rows() {
        let row = weights.row_mut(i);
        softmax_in_place(row);
        let mut total = 0.0;
        for (w, &m) in row.iter_mut().zip(mask.matrix().row(i)) {
            *w *= m;
            total += *w;
        }
        if !(total >= DEGENERATE_ROW_THRESHOLD) {
            return Err(Error::DegenerateRow { row: i, sum: total });
        }
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    Ok(weights)
}

pub fn masked_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    mask: &AttentionMask,
) -> Result<DenseMatrix> {
    if k.rows() != v.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    masked_weights(q, k, mask)?.matmul(v)
}

pub fn masked_self_attention(x: &DenseMatrix, mask: &AttentionMask) -> Result<DenseMatrix> {
    masked_attention(x, x, x, mask)
}
