use ndarray::Array2;
use rayon::prelude::*;

use super::{CostMatrix, Matching, TransportPlan};
use crate::error::{Result, StellarError};

/// Settings for [`entropic_ot_plan`]. `epsilon = None` selects
/// [`default_epsilon`] per cost matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtConfig {
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

impl OtConfig {
    pub fn epsilon_for(&self, cost: &CostMatrix) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(cost))
    }

    pub fn solve(&self, cost: &CostMatrix) -> Result<TransportPlan> {
        entropic_ot_plan(cost, self.epsilon_for(cost), self.max_iters, self.tol)
    }
}

/// `0.05 × mean(cost)`, floored at 1e-12 so an all-zero cost stays valid.
pub fn default_epsilon(cost: &CostMatrix) -> f64 {
    let v = cost.view();
    (0.05 * v.sum() / v.len() as f64).max(1e-12)
}

/// Sinkhorn fixed point of the entropic OT problem between two uniform
/// marginals of mass `1/r`.
///
/// The kernel is built from dual potentials initialised to the row and column
/// minima of the cost, so every row and column holds an entry equal to one.
/// Whenever a scaling vector drifts far from one it is absorbed back into the
/// potentials, which keeps the iteration finite for small `epsilon`.
pub fn entropic_ot_plan(cost: &CostMatrix, epsilon: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(StellarError::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let c = cost.view();
    let r = cost.r();
    let a = 1.0 / r as f64;
    let cs: Vec<f64> = c.iter().copied().collect();

    let mut f: Vec<f64> = cs.chunks(r).map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let mut g = vec![f64::INFINITY; r];
    for i in 0..r {
        for j in 0..r {
            g[j] = g[j].min(cs[i * r + j] - f[i]);
        }
    }
    let mut kern = vec![0.0; r * r];
    let build = |kern: &mut [f64], f: &[f64], g: &[f64]| {
        for i in 0..r {
            for j in 0..r {
                kern[i * r + j] = (-(cs[i * r + j] - f[i] - g[j]) / epsilon).exp();
            }
        }
    };
    build(&mut kern, &f, &g);

    let mut u = vec![1.0; r];
    let mut v = vec![1.0; r];
    let mut kv = vec![0.0; r];
    let mut ktu = vec![0.0; r];
    let mut iterations_used = 0;
    let mut converged = false;
    loop {
        for i in 0..r {
            kv[i] = kern[i * r..(i + 1) * r].iter().zip(&v).map(|(k, vj)| k * vj).sum();
        }
        if iterations_used > 0 {
            let row_err = (0..r).map(|i| (u[i] * kv[i] - a).abs()).fold(0.0, f64::max);
            if row_err < tol {
                converged = true;
                break;
            }
        }
        if iterations_used == max_iters {
            break;
        }
        for i in 0..r {
            u[i] = a / kv[i];
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..r {
            let ui = u[i];
            for (t, k) in ktu.iter_mut().zip(&kern[i * r..(i + 1) * r]) {
                *t += k * ui;
            }
        }
        for j in 0..r {
            v[j] = a / ktu[j];
        }
        iterations_used += 1;

        let drift = u.iter().chain(&v).any(|x| !(1e-50..=1e50).contains(x));
        if drift {
            for i in 0..r {
                f[i] += epsilon * u[i].ln();
            }
            for j in 0..r {
                g[j] += epsilon * v[j].ln();
            }
            if f.iter().chain(&g).any(|x| !x.is_finite()) {
                return Err(StellarError::invalid("entropic OT diverged: non-finite potentials"));
            }
            build(&mut kern, &f, &g);
            u.iter_mut().for_each(|x| *x = 1.0);
            v.iter_mut().for_each(|x| *x = 1.0);
        }
    }

    let mut plan = Array2::zeros((r, r));
    for i in 0..r {
        for j in 0..r {
            plan[[i, j]] = u[i] * kern[i * r + j] * v[j];
        }
    }
    let row_error = plan.rows().into_iter().map(|row| (row.sum() - a).abs()).fold(0.0, f64::max);
    let col_error = plan.columns().into_iter().map(|col| (col.sum() - a).abs()).fold(0.0, f64::max);
    if !converged {
        log::debug!("entropic OT did not reach tol {tol} in {max_iters} iterations (row error {row_error:.3e})");
    }
    Ok(TransportPlan {
        values: plan,
        epsilon,
        iterations_used,
        converged,
        row_error,
        col_error,
    })
}

/// Solves a batch of independent problems, optionally across threads.
pub fn entropic_ot_batch(costs: &[CostMatrix], config: &OtConfig, parallel: bool) -> Result<Vec<TransportPlan>> {
    if parallel {
        costs.par_iter().map(|c| config.solve(c)).collect()
    } else {
        costs.iter().map(|c| config.solve(c)).collect()
    }
}

/// Row-wise argmax of the plan, lowest index on ties.
pub fn extract_matching(plan: &TransportPlan) -> Matching {
    let sigma = plan
        .values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Matching { sigma }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::hungarian;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cost(values: Array2<f64>) -> CostMatrix {
        CostMatrix::new(values).unwrap()
    }

    #[test]
    fn zero_cost_gives_uniform_plan() {
        let c = cost(Array2::zeros((4, 4)));
        let p = OtConfig::default().solve(&c).unwrap();
        assert!(p.converged);
        assert!(p.values.iter().all(|v| (*v - 1.0 / 16.0).abs() < 1e-12));
    }

    fn permutations(r: usize) -> Vec<Vec<usize>> {
        if r == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(r - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, r - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn peaked_plan_matches_exact_ot_on_birkhoff_vertices() {
        let m = 50.0;
        let r = 3;
        let c = cost(Array2::from_shape_fn((r, r), |(i, j)| if i == j { 0.0 } else { m }));
        let p = entropic_ot_plan(&c, m / 100.0, 200, 1e-6).unwrap();
        // Exact OT with uniform marginals is attained at a scaled permutation.
        let best = permutations(r)
            .into_iter()
            .min_by(|x, y| {
                let cx: f64 = x.iter().enumerate().map(|(i, &j)| c.view()[[i, j]]).sum();
                let cy: f64 = y.iter().enumerate().map(|(i, &j)| c.view()[[i, j]]).sum();
                cx.partial_cmp(&cy).unwrap()
            })
            .unwrap();
        for i in 0..r {
            for j in 0..r {
                let exact = if best[i] == j { 1.0 / r as f64 } else { 0.0 };
                assert!((p.values[[i, j]] - exact).abs() < 1e-6);
                if i != j {
                    assert!(p.values[[i, j]] < 1e-6);
                }
            }
        }
    }

    #[test]
    fn permuted_identical_sets_recover_inverse_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = 8;
        let tokens = Array2::from_shape_fn((r, 5), |_| rng.gen_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..r).collect();
        perm.shuffle(&mut rng);
        let view = Array2::from_shape_fn((r, 5), |(i, k)| tokens[[perm[i], k]]);
        let c = CostMatrix::from_tokens(view.view(), tokens.view()).unwrap();
        let m = extract_matching(&OtConfig::default().solve(&c).unwrap());
        assert_eq!(m.sigma, perm);
        assert_eq!(m, hungarian(c.view()).unwrap());
    }

    #[test]
    fn swapped_pair() {
        let c = cost(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let m = extract_matching(&OtConfig::default().solve(&c).unwrap());
        assert_eq!(m.sigma, vec![1, 0]);
        assert_eq!(m, hungarian(c.view()).unwrap());
    }

    #[test]
    fn ties_pick_lowest_index() {
        let plan = TransportPlan {
            values: Array2::from_elem((3, 3), 1.0 / 9.0),
            epsilon: 1.0,
            iterations_used: 0,
            converged: true,
            row_error: 0.0,
            col_error: 0.0,
        };
        assert_eq!(extract_matching(&plan).sigma, vec![0, 0, 0]);
        let mut eye = plan.clone();
        eye.values = Array2::eye(3) / 3.0;
        assert_eq!(extract_matching(&eye), Matching::identity(3));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let c = cost(Array2::zeros((2, 2)));
        assert!(entropic_ot_plan(&c, 0.0, 10, 1e-6).is_err());
        assert!(entropic_ot_plan(&c, -1.0, 10, 1e-6).is_err());
    }

    #[test]
    fn iteration_cap_flags_nonconvergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cost(Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.0..1.0)));
        let p = entropic_ot_plan(&c, 0.01, 1, 1e-12).unwrap();
        assert!(!p.converged);
        assert_eq!(p.iterations_used, 1);
        assert!(p.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn tiny_epsilon_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cost(Array2::from_shape_fn((10, 10), |_| rng.gen_range(0.0..100.0)));
        let p = entropic_ot_plan(&c, 1e-3, 2000, 1e-9).unwrap();
        assert!(p.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(p.col_error < 1e-9);
        if p.converged {
            assert!(extract_matching(&p).is_permutation());
        }
    }

    proptest! {
        #[test]
        fn converged_plans_meet_marginals(seed in 0u64..10_000, r in 1usize..12, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = cost(Array2::from_shape_fn((r, r), |_| rng.gen_range(0.0..scale)));
            let p = OtConfig::default().solve(&c).unwrap();
            prop_assert!(p.values.iter().all(|v| *v >= 0.0));
            if p.converged {
                prop_assert!(p.row_error < 1e-6 && p.col_error < 1e-6);
            }
            let again = OtConfig::default().solve(&c).unwrap();
            prop_assert_eq!(p, again);
        }
    }
}
