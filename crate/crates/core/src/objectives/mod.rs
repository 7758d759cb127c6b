//! Loss terms of the factorized objective, their analytic gradients, and a
//! central-difference gradient checker.
//!
//! The public functions operate on `f64` arrays. The `*_with_grad` kernels are
//! generic over [`Real`] and back the corresponding nodes of the autodiff
//! graph used during training.

mod grad_check;

use std::fmt::Write as _;

use ndarray::{Array, Array2, ArrayView, ArrayView2, Dimension};

use crate::error::{Result, StellarError};
use crate::tensor::Real;
use crate::transport::{AssignmentMatrix, BalancedTargets, Matching};

pub use grad_check::{grad_check, grad_check_with};

/// Added inside every logarithm of an assignment probability.
pub const LOG_EPS: f64 = 1e-12;
/// Lower clamp for norms and KoLeo distances.
pub const NORM_EPS: f64 = 1e-8;

pub const TERM_NAMES: [&str; 6] = ["recon", "cluster", "align", "cluster_cls", "align_cls", "koleo"];
pub const LOSS_CSV_HEADER: &str = "step,recon,cluster,align,cluster_cls,align_cls,koleo,total";

/// Weights a₁..a₆ of the total objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub cluster: f64,
    pub align: f64,
    pub cluster_cls: f64,
    pub align_cls: f64,
    pub koleo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            cluster: 1.0,
            align: 1.0,
            cluster_cls: 0.5,
            align_cls: 0.5,
            koleo: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.recon, self.cluster, self.align, self.cluster_cls, self.align_cls, self.koleo]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            recon: a[0],
            cluster: a[1],
            align: a[2],
            cluster_cls: a[3],
            align_cls: a[4],
            koleo: a[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(StellarError::invalid("loss weights must be finite and nonnegative"));
        }
        if a.iter().all(|w| *w == 0.0) {
            return Err(StellarError::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Per-term loss values and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub cluster: f64,
    pub align: f64,
    pub cluster_cls: f64,
    pub align_cls: f64,
    pub koleo: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.recon, self.cluster, self.align, self.cluster_cls, self.align_cls, self.koleo]
    }

    pub fn csv_row(&self, step: u64) -> String {
        let mut out = step.to_string();
        for v in self.terms().iter().chain(std::iter::once(&self.total)) {
            let _ = write!(out, ",{v}");
        }
        out
    }
}

/// Weighted sum of the six terms, in fixed order.
pub fn total_objective(terms: [f64; 6], weights: &LossWeights) -> Result<LossBreakdown> {
    if let Some(i) = terms.iter().position(|t| !t.is_finite()) {
        return Err(StellarError::NonFiniteLoss {
            term: TERM_NAMES[i],
            step: 0,
        });
    }
    let total = terms
        .iter()
        .zip(weights.as_array())
        .fold(0.0, |acc, (t, w)| acc + w * t);
    Ok(LossBreakdown {
        recon: terms[0],
        cluster: terms[1],
        align: terms[2],
        cluster_cls: terms[3],
        align_cls: terms[4],
        koleo: terms[5],
        total,
    })
}

/// Mean squared error between a decoded image and its target.
pub fn recon_loss<D: Dimension>(decoded: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Result<f64> {
    if decoded.shape() != target.shape() {
        return Err(StellarError::shape(
            "recon_loss",
            format!("{:?}", target.shape()),
            format!("{:?}", decoded.shape()),
        ));
    }
    let d: Vec<f64> = decoded.iter().copied().collect();
    let t: Vec<f64> = target.iter().copied().collect();
    Ok(mse_with_grad(&d, &t).0)
}

/// Gradient of [`recon_loss`] with respect to the decoded image.
pub fn recon_loss_grad<D: Dimension>(decoded: ArrayView<f64, D>, target: ArrayView<f64, D>) -> Array<f64, D> {
    let n = decoded.len() as f64;
    let mut g = decoded.to_owned();
    g.zip_mut_with(&target, |d, t| *d = 2.0 * (*d - t) / n);
    g
}

pub fn mse_with_grad<T: Real>(x: &[T], target: &[T]) -> (T, Vec<T>) {
    let inv_n = T::one() / T::of(x.len().max(1) as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    for (&a, &b) in x.iter().zip(target) {
        let d = a - b;
        loss += d * d;
        grad.push(T::of(2.0) * d * inv_n);
    }
    (loss * inv_n, grad)
}

/// Rows scaled to unit norm, norms clamped below at [`NORM_EPS`].
pub fn normalize_rows<T: Real>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = row_norm(row.view());
        row.mapv_inplace(|v| v / norm);
    }
    out
}

fn row_norm<T: Real>(row: ndarray::ArrayView1<T>) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(NORM_EPS))
}

/// `λ = normalize(h(tokens)) · Cᵀ`, with `C` normalized row-wise as well.
pub fn prototype_logits(
    tokens: ArrayView2<f64>,
    projector: impl Fn(ArrayView2<f64>) -> Array2<f64>,
    prototypes: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let projected = projector(tokens);
    if projected.ncols() != prototypes.ncols() {
        return Err(StellarError::shape(
            "prototype_logits",
            format!("projection width {}", prototypes.ncols()),
            projected.ncols(),
        ));
    }
    let h = normalize_rows(projected.view());
    let c = normalize_rows(prototypes);
    Ok(h.dot(&c.t()))
}

/// Row-wise softmax of `logits / temperature`.
pub fn soft_assign(logits: ArrayView2<f64>, temperature: f64) -> Result<AssignmentMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(StellarError::invalid(format!("temperature must be positive, got {temperature}")));
    }
    Ok(AssignmentMatrix {
        values: softmax_rows(logits, temperature),
        temperature,
    })
}

pub fn softmax_rows<T: Real>(logits: ArrayView2<T>, tau: T) -> Array2<T> {
    let mut q = logits.mapv(|v| v / tau);
    for mut row in q.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    q
}

/// Mean over rows of `−Σ_k t_k log(q_k + 1e-12)`. Each row's terms are summed
/// in sorted order so the value does not depend on column order.
fn cross_entropy(targets: ArrayView2<f64>, assignments: ArrayView2<f64>) -> f64 {
    let n = targets.nrows();
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(targets.ncols());
    for (t, q) in targets.rows().into_iter().zip(assignments.rows()) {
        terms.clear();
        terms.extend(t.iter().zip(q).map(|(&t, &q)| -t * (q + LOG_EPS).ln()));
        terms.sort_by(f64::total_cmp);
        total += terms.iter().sum::<f64>();
    }
    total / n as f64
}

fn check_same_shape(op: &'static str, a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(StellarError::shape(op, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// Cross-entropy between balanced targets and assignments over all N rows.
pub fn cluster_loss(targets: &BalancedTargets, assignments: &AssignmentMatrix) -> Result<f64> {
    check_same_shape("cluster_loss", targets.values.view(), assignments.values.view())?;
    Ok(cross_entropy(targets.values.view(), assignments.values.view()))
}

/// Gradient of [`cluster_loss`] with respect to the assignment probabilities.
pub fn cluster_loss_grad(targets: ArrayView2<f64>, assignments: ArrayView2<f64>) -> Array2<f64> {
    let n = targets.nrows() as f64;
    let mut g = Array2::zeros(targets.dim());
    ndarray::Zip::from(&mut g)
        .and(&targets)
        .and(&assignments)
        .for_each(|g, &t, &q| *g = -t / (n * (q + LOG_EPS)));
    g
}

/// Global-view target rows reordered by the matching: row `j'` is `q̃[σ(j')]`.
pub fn permute_targets(targets: ArrayView2<f64>, matching: &Matching) -> Result<Array2<f64>> {
    let r = targets.nrows();
    if matching.len() != r {
        return Err(StellarError::invalid(format!("matching has length {}, expected {r}", matching.len())));
    }
    if let Some(&bad) = matching.sigma.iter().find(|&&j| j >= r) {
        return Err(StellarError::invalid(format!("matching index {bad} out of range for r={r}")));
    }
    Ok(Array2::from_shape_fn(targets.dim(), |(i, k)| targets[[matching.sigma[i], k]]))
}

/// Cross-entropy between matched global targets and view assignments.
pub fn align_loss(global_targets: &BalancedTargets, view_assignments: &AssignmentMatrix, matching: &Matching) -> Result<f64> {
    check_same_shape("align_loss", global_targets.values.view(), view_assignments.values.view())?;
    let matched = permute_targets(global_targets.values.view(), matching)?;
    Ok(cross_entropy(matched.view(), view_assignments.values.view()))
}

/// CLS clustering and alignment: `cls_targets` are balanced targets for the
/// batch of global CLS tokens, `cls_global` the student's global CLS tokens
/// and `cls_views` one batch of CLS tokens per extra view. Returns
/// `(cluster_cls, align_cls)`, the latter averaged over views.
pub fn cls_cluster_and_align(
    cls_targets: &BalancedTargets,
    cls_global: ArrayView2<f64>,
    cls_views: &[ArrayView2<f64>],
    projector: impl Fn(ArrayView2<f64>) -> Array2<f64>,
    prototypes: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, f64)> {
    let assign = |x: ArrayView2<f64>| -> Result<AssignmentMatrix> {
        soft_assign(prototype_logits(x, &projector, prototypes)?.view(), temperature)
    };
    let cluster = cluster_loss(cls_targets, &assign(cls_global)?)?;
    let mut align = 0.0;
    for v in cls_views {
        align += cluster_loss(cls_targets, &assign(*v)?)?;
    }
    if !cls_views.is_empty() {
        align /= cls_views.len() as f64;
    }
    Ok((cluster, align))
}

/// Soft cross-entropy `mean_i −Σ_k t_ik log(softmax(z_i/τ)_k + 1e-12)` and its
/// gradient with respect to the logits `z`.
pub fn soft_cross_entropy_with_grad<T: Real>(targets: ArrayView2<T>, logits: ArrayView2<T>, tau: T) -> (T, Array2<T>) {
    let n = logits.nrows();
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let eps = T::of(LOG_EPS);
    let q = softmax_rows(logits, tau);
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for ((t, q), mut g) in targets.rows().into_iter().zip(q.rows()).zip(grad.rows_mut()) {
        let mut dot = T::zero();
        for ((gk, &tk), &qk) in g.iter_mut().zip(t).zip(q) {
            loss -= tk * (qk + eps).ln();
            *gk = -tk * inv_n / (qk + eps);
            dot += *gk * qk;
        }
        for (gk, &qk) in g.iter_mut().zip(q) {
            *gk = qk * (*gk - dot) / tau;
        }
    }
    (loss * inv_n, grad)
}

/// KoLeo regularizer on one token set.
pub fn koleo_loss(tokens: ArrayView2<f64>) -> Result<f64> {
    if tokens.nrows() < 2 {
        return Err(StellarError::invalid("koleo_loss needs at least two tokens"));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(StellarError::invalid("koleo_loss tokens must be finite"));
    }
    Ok(koleo_with_grad(tokens).0)
}

/// KoLeo value and gradient: rows are normalized, each row's nearest
/// neighbour distance is halved and clamped at 1e-8, and the loss is the
/// negative mean log. Per-row terms are summed in sorted order, so the value
/// is exactly invariant to row order.
pub fn koleo_with_grad<T: Real>(tokens: ArrayView2<T>) -> (T, Array2<T>) {
    let (r, d) = tokens.dim();
    let mut grad = Array2::zeros((r, d));
    if r < 2 {
        return (T::zero(), grad);
    }
    let xbar = normalize_rows(tokens);
    let floor = T::of(NORM_EPS);
    let half = T::of(0.5);
    let inv_r = T::one() / T::of(r as f64);
    let mut terms = Vec::with_capacity(r);
    let mut dbar: Array2<T> = Array2::zeros((r, d));
    if xbar.iter().any(|v| !v.is_finite()) {
        return (T::nan(), grad.mapv(|_: T| T::nan()));
    }
    for j in 0..r {
        let mut best = usize::MAX;
        let mut best_d2 = T::infinity();
        for k in 0..r {
            if k == j {
                continue;
            }
            let d2: T = xbar.row(j).iter().zip(xbar.row(k)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = k;
            }
        }
        let dist = best_d2.sqrt();
        let h = half * dist;
        if h > floor {
            terms.push(-h.ln());
            // d(−log(½‖a−b‖))/da = −(a−b)/‖a−b‖²
            let scale = inv_r / best_d2;
            for c in 0..d {
                let diff = xbar[[j, c]] - xbar[[best, c]];
                dbar[[j, c]] -= scale * diff;
                dbar[[best, c]] += scale * diff;
            }
        } else {
            terms.push(-floor.ln());
        }
    }
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let loss = terms.into_iter().fold(T::zero(), |a, b| a + b) * inv_r;

    // Back through the row normalization.
    for j in 0..r {
        let norm = row_norm(tokens.row(j));
        let dot: T = if norm > floor {
            dbar.row(j).iter().zip(xbar.row(j)).map(|(&a, &b)| a * b).sum()
        } else {
            T::zero()
        };
        for c in 0..d {
            grad[[j, c]] = (dbar[[j, c]] - xbar[[j, c]] * dot) / norm;
        }
    }
    (loss, grad)
}
