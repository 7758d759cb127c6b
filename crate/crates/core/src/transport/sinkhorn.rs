use ndarray::{Array2, ArrayView2, Axis};

use super::{check_finite, BalancedTargets};
use crate::error::{Result, StellarError};

/// Rounds used for clustering targets during training.
pub const SK_DEFAULT_ITERS: usize = 3;

/// Balanced soft targets from prototype logits.
///
/// The plan starts as the row-wise softmax of `logits / temperature`; each
/// round then rescales columns to sum to `N/K` and rows to sum to 1. Starting
/// from normalized rows makes the result invariant to per-row constant
/// offsets of the logits.
pub fn sinkhorn_knopp(logits: ArrayView2<f64>, temperature: f64, iters: usize) -> Result<BalancedTargets> {
    let (n, k) = logits.dim();
    if n == 0 || k == 0 {
        return Err(StellarError::invalid("sinkhorn_knopp needs at least one row and column"));
    }
    if iters == 0 {
        return Err(StellarError::invalid("sinkhorn_knopp needs iters >= 1"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(StellarError::invalid(format!("temperature must be positive, got {temperature}")));
    }
    check_finite(logits, "logits")?;

    let mut q = logits.to_owned();
    for mut row in q.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| ((v - max) / temperature).exp());
    }
    normalize_rows(&mut q);

    let col_target = n as f64 / k as f64;
    let mut col_sums = vec![0.0; k];
    for _ in 0..iters {
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for row in q.rows() {
            for (s, v) in col_sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        for row in q.rows_mut() {
            for (v, s) in row.into_iter().zip(&col_sums) {
                // A column that underflowed entirely stays at zero.
                if *s > 0.0 {
                    *v *= col_target / s;
                }
            }
        }
        normalize_rows(&mut q);
    }

    let col_error = q
        .sum_axis(Axis(0))
        .iter()
        .map(|s| (s - col_target).abs())
        .fold(0.0, f64::max);
    normalize_rows(&mut q);
    Ok(BalancedTargets { values: q, col_error })
}

fn normalize_rows(q: &mut Array2<f64>) {
    for mut row in q.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}
