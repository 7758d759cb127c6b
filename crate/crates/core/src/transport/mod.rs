//! Transport solvers: Sinkhorn-Knopp balancing for clustering targets,
//! entropic optimal transport for token matching, an exact Hungarian solver,
//! and a benchmark comparing the two matching paths.
//!
//! All solvers work in `f64` and are pure functions of their inputs.

mod bench;
mod hungarian;
mod ot;
mod sinkhorn;

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, StellarError};

pub use bench::{bench_matching, random_cost_batch, BenchConfig, BenchReport, BenchRow, BENCH_CSV_HEADER};
pub use hungarian::hungarian;
pub use ot::{default_epsilon, entropic_ot_batch, entropic_ot_plan, extract_matching, OtConfig};
pub use sinkhorn::{sinkhorn_knopp, SK_DEFAULT_ITERS};

/// Row-stochastic soft assignment of N tokens over K prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub values: Array2<f64>,
    pub temperature: f64,
}

/// Output of [`sinkhorn_knopp`]. Gradient-stopped by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BalancedTargets {
    pub values: Array2<f64>,
    /// Largest |column sum − N/K| of the plan before the final row
    /// renormalization.
    pub col_error: f64,
}

/// Square matrix of nonnegative pairwise distances.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r == 0 {
            return Err(StellarError::shape("cost matrix", "non-empty square", format!("{r}x{c}")));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(StellarError::invalid("cost entries must be finite and nonnegative"));
        }
        Ok(Self { values })
    }

    /// `Θ[j', j] = ‖a[j'] − b[j]‖₂` between two token sets of equal size.
    pub fn from_tokens(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(StellarError::shape(
                "cost from tokens",
                format!("{:?}", a.dim()),
                format!("{:?}", b.dim()),
            ));
        }
        let r = a.nrows();
        let mut values = Array2::zeros((r, r));
        for (i, ai) in a.rows().into_iter().enumerate() {
            for (j, bj) in b.rows().into_iter().enumerate() {
                values[[i, j]] = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
        }
        Self::new(values)
    }

    pub fn r(&self) -> usize {
        self.values.nrows()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Entropic OT plan with uniform marginals `1/r`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub values: Array2<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub row_error: f64,
    pub col_error: f64,
}

/// `sigma[j']` is the index of the global-view token matched to view token `j'`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    pub sigma: Vec<usize>,
}

impl Matching {
    pub fn identity(r: usize) -> Self {
        Self { sigma: (0..r).collect() }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.sigma.len()];
        self.sigma.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }

    /// Total cost `Σ cost[j', σ(j')]`.
    pub fn cost(&self, cost: ArrayView2<f64>) -> f64 {
        self.sigma.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum()
    }
}

pub(crate) fn check_finite(values: ArrayView2<f64>, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StellarError::invalid(format!("{what} contains non-finite values")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cost_from_identical_tokens_has_zero_diagonal() {
        let t = array![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let c = CostMatrix::from_tokens(t.view(), t.view()).unwrap();
        for i in 0..3 {
            assert_eq!(c.view()[[i, i]], 0.0);
        }
        assert!(c.view().iter().all(|v| *v >= 0.0));
        assert!((c.view()[[0, 1]] - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cost_rejects_negative_and_nonsquare() {
        assert!(CostMatrix::new(array![[0.0, -1.0], [1.0, 0.0]]).is_err());
        assert!(CostMatrix::new(Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn permutation_check() {
        assert!(Matching { sigma: vec![2, 0, 1] }.is_permutation());
        assert!(!Matching { sigma: vec![0, 0, 1] }.is_permutation());
        assert!(!Matching { sigma: vec![0, 3, 1] }.is_permutation());
    }
}
