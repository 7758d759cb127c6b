//! The factorized latent `Z = L·S` and the probes that measure how spatial
//! change splits between `L` and `S`.

mod probes;

use ndarray::{Array2, ArrayView2};

use crate::error::{Result, StellarError};

pub use probes::{
    crop_csv, crop_robustness_probe, shift_csv, shift_probe, CropRobustness, ImageEncoder, ShiftAxis,
    ShiftProbeResult, CROP_CSV_HEADER, SHIFT_CSV_HEADER,
};

/// Tolerance on localization row sums.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// `r × d` semantic tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMatrix {
    pub values: Array2<f64>,
}

impl SemanticMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(StellarError::invalid("semantic matrix needs r >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StellarError::invalid("semantic matrix must be finite"));
        }
        Ok(Self { values })
    }

    pub fn r(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }
}

/// `n × r` row-stochastic spatial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMatrix {
    pub values: Array2<f64>,
}

impl LocalizationMatrix {
    /// Validating constructor: entries in `[0, 1]`, rows summing to one.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let loc = Self { values };
        let report = loc_checks(loc.values.view());
        if let Some(bad) = report.iter().find(|c| !c.passed) {
            return Err(StellarError::invalid(format!(
                "localization check `{}` failed by {:.3e}",
                bad.name, bad.worst_violation
            )));
        }
        Ok(loc)
    }

    /// Wraps values without checking them, e.g. to report on them with
    /// [`validate_factorized`].
    pub fn new_unchecked(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn r(&self) -> usize {
        self.values.ncols()
    }
}

/// A localization/semantic pair with its product.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLatent {
    pub loc: LocalizationMatrix,
    pub sem: SemanticMatrix,
    composed: Array2<f64>,
}

impl FactorizedLatent {
    pub fn new(loc: LocalizationMatrix, sem: SemanticMatrix) -> Result<Self> {
        let composed = compose(&loc, &sem)?;
        Ok(Self { loc, sem, composed })
    }

    pub fn composed(&self) -> ArrayView2<'_, f64> {
        self.composed.view()
    }
}

/// `Z = L·S`. Each entry sums its `r` products in sorted order, so the result
/// is bitwise invariant to a joint reordering of the tokens.
pub fn compose(loc: &LocalizationMatrix, sem: &SemanticMatrix) -> Result<Array2<f64>> {
    let (n, r) = loc.values.dim();
    if r != sem.r() {
        return Err(StellarError::shape("compose", format!("{r} tokens"), sem.r()));
    }
    let d = sem.d();
    let mut out = Array2::zeros((n, d));
    let mut terms = vec![0.0; r];
    for i in 0..n {
        for k in 0..d {
            for (j, t) in terms.iter_mut().enumerate() {
                *t = loc.values[[i, j]] * sem.values[[j, k]];
            }
            terms.sort_by(f64::total_cmp);
            out[[i, k]] = terms.iter().sum();
        }
    }
    Ok(out)
}

/// Outcome of one invariant check.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub worst_violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<InvariantCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &'static str, worst_violation: f64, tol: f64) -> InvariantCheck {
    InvariantCheck {
        name,
        passed: worst_violation <= tol,
        worst_violation,
    }
}

fn loc_checks(l: ArrayView2<f64>) -> Vec<InvariantCheck> {
    let finite = l.iter().all(|v| v.is_finite());
    let below = l.iter().fold(0.0f64, |acc, &v| acc.max(-v));
    let above = l.iter().fold(0.0f64, |acc, &v| acc.max(v - 1.0));
    let row_sum = l.rows().into_iter().fold(0.0f64, |acc, row| acc.max((row.sum() - 1.0).abs()));
    vec![
        check("loc_finite", if finite { 0.0 } else { f64::INFINITY }, 0.0),
        check("loc_nonnegative", below, 0.0),
        check("loc_at_most_one", above, 0.0),
        check("loc_row_sum", if finite { row_sum } else { f64::INFINITY }, ROW_SUM_TOL),
    ]
}

/// Per-invariant pass/fail with the worst violation magnitude.
pub fn validate_factorized(latent: &FactorizedLatent) -> ValidationReport {
    let mut checks = loc_checks(latent.loc.values.view());
    let sem = &latent.sem.values;
    checks.push(check(
        "sem_finite",
        if sem.iter().all(|v| v.is_finite()) { 0.0 } else { f64::INFINITY },
        0.0,
    ));

    // Each composed row must lie inside the per-coordinate range of the
    // semantic rows (a convex combination cannot leave it).
    let z = &latent.composed;
    let mut hull = 0.0f64;
    for k in 0..sem.ncols() {
        let col = sem.column(k);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for &v in z.column(k) {
            hull = hull.max(lo - v).max(v - hi);
        }
    }
    let scale = sem.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    checks.push(check("composed_in_token_range", hull.max(0.0), 1e-9 * scale));
    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_loc(rng: &mut ChaCha8Rng, n: usize, r: usize) -> LocalizationMatrix {
        let mut l = Array2::from_shape_fn((n, r), |_| rng.gen_range(-2.0f64..2.0).exp());
        for mut row in l.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        LocalizationMatrix::new(l).unwrap()
    }

    fn random_sem(rng: &mut ChaCha8Rng, r: usize, d: usize) -> SemanticMatrix {
        SemanticMatrix::new(Array2::from_shape_fn((r, d), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn one_hot_selects_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sem = random_sem(&mut rng, 3, 4);
        let mut l = Array2::zeros((5, 3));
        l.column_mut(0).fill(1.0);
        let z = compose(&LocalizationMatrix::new(l).unwrap(), &sem).unwrap();
        for row in z.rows() {
            assert_eq!(row, sem.values.row(0));
        }
    }

    #[test]
    fn uniform_gives_mean_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sem = random_sem(&mut rng, 4, 3);
        let l = LocalizationMatrix::new(Array2::from_elem((2, 4), 0.25)).unwrap();
        let z = compose(&l, &sem).unwrap();
        let mean = sem.values.mean_axis(ndarray::Axis(0)).unwrap();
        for row in z.rows() {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random_loc(&mut rng, 5, 3);
        let s = random_sem(&mut rng, 3, 4);
        let z = compose(&l, &s).unwrap();
        for i in 0..5 {
            for k in 0..4 {
                let mut acc = 0.0;
                for j in 0..3 {
                    acc += l.values[[i, j]] * s.values[[j, k]];
                }
                assert!((z[[i, k]] - acc).abs() < 1e-12);
            }
        }
        assert!(compose(&l, &random_sem(&mut rng, 2, 4)).is_err());
    }

    #[test]
    fn validation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random_loc(&mut rng, 6, 3);
        let s = random_sem(&mut rng, 3, 5);
        let latent = FactorizedLatent::new(l.clone(), s.clone()).unwrap();
        assert!(validate_factorized(&latent).all_passed());

        let mut doubled = l.values.clone();
        doubled.row_mut(2).mapv_inplace(|v| v * 2.0);
        let bad = FactorizedLatent::new(LocalizationMatrix::new_unchecked(doubled), s.clone()).unwrap();
        let report = validate_factorized(&bad);
        let row = report.get("loc_row_sum").unwrap();
        assert!(!row.passed);
        assert!((row.worst_violation - 1.0).abs() < 1e-12);

        let mut negative = l.values.clone();
        negative[[1, 1]] = -0.1;
        let bad = FactorizedLatent::new(LocalizationMatrix::new_unchecked(negative), s).unwrap();
        let nonneg = validate_factorized(&bad).get("loc_nonnegative").unwrap().clone();
        assert!(!nonneg.passed);
        assert!((nonneg.worst_violation - 0.1).abs() < 1e-15);
        assert!(LocalizationMatrix::new(Array2::from_elem((2, 2), 0.7)).is_err());
    }

    proptest! {
        #[test]
        fn bilinear(seed in 0u64..5000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l1 = random_loc(&mut rng, 5, 4);
            let l2 = random_loc(&mut rng, 5, 4);
            let s1 = random_sem(&mut rng, 4, 3);
            let s2 = random_sem(&mut rng, 4, 3);
            let mix_l = LocalizationMatrix::new_unchecked(&l1.values * a + &l2.values * b);
            let lhs = compose(&mix_l, &s1).unwrap();
            let rhs = compose(&l1, &s1).unwrap() * a + compose(&l2, &s1).unwrap() * b;
            prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-10));
            let mix_s = SemanticMatrix::new(&s1.values * a + &s2.values * b).unwrap();
            let lhs = compose(&l1, &mix_s).unwrap();
            let rhs = compose(&l1, &s1).unwrap() * a + compose(&l1, &s2).unwrap() * b;
            prop_assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-10));
        }

        #[test]
        fn token_permutation_is_exact(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_loc(&mut rng, 6, 5);
            let s = random_sem(&mut rng, 5, 4);
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let lp = LocalizationMatrix::new_unchecked(Array2::from_shape_fn((6, 5), |(i, j)| l.values[[i, perm[j]]]));
            let sp = SemanticMatrix::new(Array2::from_shape_fn((5, 4), |(j, k)| s.values[[perm[j], k]])).unwrap();
            prop_assert_eq!(compose(&l, &s).unwrap(), compose(&lp, &sp).unwrap());
        }

        #[test]
        fn rows_stay_in_token_range(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let latent = FactorizedLatent::new(random_loc(&mut rng, 7, 4), random_sem(&mut rng, 4, 6)).unwrap();
            let report = validate_factorized(&latent);
            prop_assert!(report.all_passed(), "{:?}", report);
            let smin = latent.sem.values.iter().copied().fold(f64::INFINITY, f64::min);
            let smax = latent.sem.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(latent.composed().iter().all(|v| *v >= smin - 1e-12 && *v <= smax + 1e-12));
        }
    }
}
