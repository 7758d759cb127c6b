//! Invariant and gradient checks runnable outside the test harness.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{localize, DecoderConfig, EncoderConfig, LocalizationHead, Model, ModelConfig};
use crate::factorization::SemanticMatrix;
use crate::objectives::grad_check;
use crate::pipeline::{batch_views, build_objective, load_dataset, teacher_targets, DatasetSource, Split, StepInputs, TrainConfig};
use crate::tensor::{Graph, Tensor, Var};
use crate::transport::{entropic_ot_plan, extract_matching, hungarian, sinkhorn_knopp, CostMatrix, OtConfig};

/// One named measurement against its threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `value < threshold`.
    pub fn below(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value < threshold,
        }
    }

    /// Passes when `value >= threshold`.
    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

pub const SELFTEST_CSV_HEADER: &str = "check,value,threshold,passed";

pub fn checks_csv(checks: &[Check]) -> String {
    let mut out = format!("{SELFTEST_CSV_HEADER}\n");
    for c in checks {
        out.push_str(&format!("{},{:?},{:?},{}\n", c.name, c.value, c.threshold, c.passed));
    }
    out
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

fn flat(parts: &[&Array2<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|a| a.iter().copied()).collect()
}

/// Splits `p` into leaves of the given shapes, builds `f` and returns the
/// loss with the gradient of every leaf.
fn graph_loss(p: &[f64], shapes: &[Vec<usize>], f: impl Fn(&Graph<f64>, &[Var]) -> Var) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let mut offset = 0;
    let leaves: Vec<Var> = shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let v = g.input(Tensor::new(s.clone(), p[offset..offset + n].to_vec()));
            offset += n;
            v
        })
        .collect();
    let loss = f(&g, &leaves);
    let grads = g.backward(loss);
    let out = leaves.iter().flat_map(|&v| grads.get(v).expect("leaf gradient").data().to_vec()).collect();
    (g.item(loss), out)
}

/// Prototype head `normalize(x·W) · normalize(C)ᵀ` on the leaves `x, W, C`.
fn proto_logits(g: &Graph<f64>, v: &[Var]) -> Var {
    let h = g.l2_normalize(g.matmul(v[0], v[1], false));
    g.matmul(h, g.l2_normalize(v[2]), true)
}

/// Central-difference checks of every loss term in 64-bit arithmetic.
pub fn loss_grad_checks(seed: u64) -> Vec<Check> {
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // recon: decode(softmax(A)·S · W) against a target.
    let (n, r, d, pd) = (6, 3, 5, 4);
    let (a, s, w) = (rand_mat(&mut rng, n, r), rand_mat(&mut rng, r, d), rand_mat(&mut rng, d, pd));
    let target = Tensor::new(vec![1, n, pd], (0..n * pd).map(|_| rng.gen_range(0.0..1.0)).collect());
    let shapes = vec![vec![1, n, r], vec![1, r, d], vec![d, pd]];
    let err = grad_check(
        |p| {
            graph_loss(p, &shapes, |g, v| {
                let l = g.softmax(v[0], 0.5);
                let z = g.bmm(l, v[1], false);
                g.mse(g.matmul(z, v[2], false), &target)
            })
        },
        &flat(&[&a, &s, &w]),
        1e-6,
    );
    out.push(Check::below("grad:recon", err, TOL));

    // The four clustering terms: soft cross-entropy of prototype logits
    // against balanced (and, for the align terms, matched) teacher targets.
    let (pdim, k) = (6, 7);
    for (name, rows, matched) in [
        ("grad:cluster", 8, false),
        ("grad:align", 8, true),
        ("grad:cluster_cls", 4, false),
        ("grad:align_cls", 4, true),
    ] {
        let (x, w, c) = (rand_mat(&mut rng, rows, d), rand_mat(&mut rng, d, pdim), rand_mat(&mut rng, k, pdim));
        let teacher_logits = rand_mat(&mut rng, rows, k);
        let mut q = sinkhorn_knopp(teacher_logits.view(), 0.05, 3).expect("finite logits").values;
        if matched {
            let cost = CostMatrix::from_tokens(rand_mat(&mut rng, rows, d).view(), rand_mat(&mut rng, rows, d).view()).expect("finite");
            let m = hungarian(cost.view()).expect("square cost");
            q = q.select(ndarray::Axis(0), &m.sigma);
        }
        let q = Tensor::from_array2(&q);
        let shapes = vec![vec![rows, d], vec![d, pdim], vec![k, pdim]];
        let err = grad_check(
            |p| graph_loss(p, &shapes, |g, v| g.soft_cross_entropy(proto_logits(g, v), &q, 0.1)),
            &flat(&[&x, &w, &c]),
            1e-6,
        );
        out.push(Check::below(name, err, TOL));
    }

    let tokens = rand_mat(&mut rng, 2 * 4, d);
    let shapes = vec![vec![2, 4, d]];
    let err = grad_check(|p| graph_loss(p, &shapes, |g, v| g.koleo(v[0])), &flat(&[&tokens]), 1e-6);
    out.push(Check::below("grad:koleo", err, TOL));
    out
}

/// Central-difference check of the complete training objective of a
/// 16×16-image, width-32 model in 64-bit arithmetic.
pub fn end_to_end_grad_check(seed: u64) -> Result<Check> {
    let config = TrainConfig {
        model: ModelConfig {
            encoder: EncoderConfig {
                image_size: 16,
                patch_size: 4,
                width: 32,
                depth: 1,
                heads: 2,
                r: 4,
                projector_dim: 8,
                k_sparse: 12,
                k_cls: 6,
                tau_spatial: 0.5,
            },
            decoder: DecoderConfig {
                width: 16,
                depth: 1,
                heads: 2,
            },
        },
        batch_size: 2,
        n_masked_views: 2,
        n_local_crops: 1,
        dataset: DatasetSource::synthetic(seed, 2, Split::Train),
        seed,
        ..TrainConfig::default()
    };
    let model = Model::init(&config.model, seed)?.cast::<f64>();
    let data = load_dataset(&config.dataset, 16)?;
    let views = batch_views(&config, &data, 0, false);
    let inputs = StepInputs::<f64>::from_views(&model, &views)?;
    let targets = teacher_targets(&model, &model.student_params(), &inputs, &config)?;
    let mut probe = model.clone();
    let err = crate::objectives::grad_check_with(
        |x| {
            probe.params.unflatten(x);
            let o = build_objective(&probe, &inputs, Some(&targets), &config, false).expect("objective");
            let g = o.graph.backward(o.total).param_grads(&probe.params);
            (o.graph.item(o.total), g.iter().flat_map(|t| t.data().iter().copied()).collect())
        },
        &model.params.flatten(),
        1e-5,
        64,
        seed,
    );
    Ok(Check::below("grad:end_to_end", err, 1e-3))
}

/// Random `r × r` costs with a planted optimum separated from every other
/// entry of its row by more than `10·ε`.
pub fn planted_costs(rng: &mut ChaCha8Rng, r: usize) -> (CostMatrix, Vec<usize>) {
    let mut sigma: Vec<usize> = (0..r).collect();
    sigma.shuffle(rng);
    let mut c = Array2::from_shape_fn((r, r), |_| rng.gen_range(0.6..1.0));
    for (i, &j) in sigma.iter().enumerate() {
        c[[i, j]] = rng.gen_range(0.0..0.05);
    }
    (CostMatrix::new(c).expect("valid cost"), sigma)
}

fn brute_force(c: &Array2<f64>) -> f64 {
    fn go(c: &Array2<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.nrows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.ncols() {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c[[row, j]], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.ncols()], 0.0, &mut best);
    best
}

/// Entropic matching against Hungarian on planted instances and Hungarian
/// against exhaustive search for `r ≤ 6`; values are agreement fractions.
pub fn transport_checks(seed: u64, planted: usize, exhaustive: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ot = OtConfig::default();
    let mut agree = 0;
    let mut gap_ok = 0;
    for _ in 0..planted {
        let (cost, sigma) = planted_costs(&mut rng, 16);
        let eps = ot.epsilon_for(&cost);
        let v = cost.view();
        let gap = (0..16)
            .map(|i| (0..16).filter(|&j| j != sigma[i]).map(|j| v[[i, j]]).fold(f64::INFINITY, f64::min) - v[[i, sigma[i]]])
            .fold(f64::INFINITY, f64::min);
        gap_ok += usize::from(gap > 10.0 * eps);
        let hu = hungarian(v).expect("square cost");
        let plan = entropic_ot_plan(&cost, eps, ot.max_iters, ot.tol).expect("valid cost");
        agree += usize::from(extract_matching(&plan) == hu && hu.sigma == sigma);
    }
    let mut exact = 0;
    for i in 0..exhaustive {
        let r = 1 + i % 6;
        let c = Array2::from_shape_fn((r, r), |_| rng.gen_range(0.0..1.0));
        let m = hungarian(c.view()).expect("square cost");
        exact += usize::from((m.cost(c.view()) - brute_force(&c)).abs() < 1e-12);
    }
    let frac = |a: usize, n: usize| if n == 0 { 1.0 } else { a as f64 / n as f64 };
    vec![
        Check::at_least("transport:planted_gap", frac(gap_ok, planted), 1.0),
        Check::at_least("transport:ot_equals_hungarian", frac(agree, planted), 1.0),
        Check::at_least("transport:hungarian_exhaustive", frac(exact, exhaustive), 1.0),
    ]
}

/// Column-marginal error after 100 iterations, row-sum error after 3, and
/// the effect of a per-row logit shift.
pub fn sinkhorn_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Array2::from_shape_fn((128, 256), |_| rng.gen_range(-3.0..3.0));
    let long = sinkhorn_knopp(logits.view(), 0.05, 100).expect("finite logits");
    let short = sinkhorn_knopp(logits.view(), 0.05, 3).expect("finite logits");
    let row_err = short.values.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    let mut shifted = logits.clone();
    for (i, mut row) in shifted.rows_mut().into_iter().enumerate() {
        row += i as f64 * 0.37 - 20.0;
    }
    let moved = sinkhorn_knopp(shifted.view(), 0.05, 3).expect("finite logits");
    let shift_err = (&moved.values - &short.values).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    vec![
        Check::below("sinkhorn:col_error_100", long.col_error, 1e-6),
        Check::below("sinkhorn:row_error_3", row_err, 1e-6),
        Check::below("sinkhorn:row_shift", shift_err, 1e-10),
    ]
}

/// Largest simplex violation over `calls` random localize calls.
pub fn localize_fuzz(seed: u64, calls: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..calls {
        let (n, r, d) = (rng.gen_range(1..12), rng.gen_range(1..9), rng.gen_range(1..9));
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let head = LocalizationHead {
            w1: rand_mat(&mut rng, d, d) * scale,
            w2: rand_mat(&mut rng, d, d),
            tau_spatial: 10f64.powf(rng.gen_range(-3.0..1.0)),
        };
        let dense = rand_mat(&mut rng, n, d) * scale;
        let sparse = SemanticMatrix::new(rand_mat(&mut rng, r, d)).expect("finite tokens");
        let l = localize(&head, dense.view(), &sparse).expect("valid shapes");
        for row in l.values.rows() {
            let low = row.iter().fold(0.0f64, |m, &v| m.max(-v).max(v - 1.0));
            let nan = if row.iter().all(|v| v.is_finite()) { 0.0 } else { f64::INFINITY };
            worst = worst.max(low).max((row.sum() - 1.0).abs()).max(nan);
        }
    }
    Check::below("localize:simplex", worst, 1e-6)
}

/// The quick suite behind `stellar selftest`.
pub fn run_selftest(seed: u64) -> Result<Vec<Check>> {
    let mut checks = sinkhorn_checks(seed);
    checks.extend(transport_checks(seed, 200, 60));
    checks.push(localize_fuzz(seed, 2000));
    checks.extend(loss_grad_checks(seed));
    checks.push(end_to_end_grad_check(seed)?);
    Ok(checks)
}
