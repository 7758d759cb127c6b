//! The full training objective assembled on one autodiff graph.

use ndarray::Array2;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::views::ViewBatch;
use crate::error::{Result, StellarError};
use crate::model::{Model, Net};
use crate::objectives::normalize_rows;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};
use crate::transport::{extract_matching, sinkhorn_knopp, CostMatrix, Matching, OtConfig};

/// Patch tensors of a batch of view sets.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub batch: usize,
    /// `[B, n, patch_dim]`
    pub global: Tensor<T>,
    /// Per masked view: `[B, m, patch_dim]` and the `B·m` patch positions.
    pub masked: Vec<(Tensor<T>, Vec<usize>)>,
    /// Per local crop: `[B, n, patch_dim]`.
    pub local: Vec<Tensor<T>>,
}

fn to_real<T: Real>(v: &[f32]) -> impl Iterator<Item = T> + '_ {
    v.iter().map(|&x| T::of(x as f64))
}

impl<T: Real> StepInputs<T> {
    pub fn from_views(model: &Model<T>, views: &[ViewBatch]) -> Result<Self> {
        let enc = &model.config().encoder;
        let (n, pd) = (enc.n(), enc.patch_dim());
        let bs = views.len();
        if bs == 0 {
            return Err(StellarError::invalid("empty batch"));
        }
        let full = |pick: &dyn Fn(&ViewBatch) -> &crate::raster::Image| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(bs * n * pd);
            for v in views {
                data.extend(to_real::<T>(&model.patchify(pick(v))?));
            }
            Ok(Tensor::new(vec![bs, n, pd], data))
        };
        let global = full(&|v| &v.global_view)?;
        let n_masked = views[0].masked_views.len();
        let n_local = views[0].local_crops.len();
        if views.iter().any(|v| v.masked_views.len() != n_masked || v.local_crops.len() != n_local) {
            return Err(StellarError::invalid("all view sets in a batch need the same view counts"));
        }
        let mut masked = Vec::with_capacity(n_masked);
        for k in 0..n_masked {
            let m = views[0].masked_views[k].visible.len();
            let mut data = Vec::with_capacity(bs * m * pd);
            let mut positions = Vec::with_capacity(bs * m);
            for v in views {
                let mv = &v.masked_views[k];
                if mv.visible.len() != m {
                    return Err(StellarError::invalid("masked views in a batch need equal visible counts"));
                }
                let patches = model.patchify(&mv.image)?;
                for &i in &mv.visible {
                    data.extend(to_real::<T>(&patches[i * pd..(i + 1) * pd]));
                }
                positions.extend_from_slice(&mv.visible);
            }
            masked.push((Tensor::new(vec![bs, m, pd], data), positions));
        }
        let local = (0..n_local).map(|k| full(&|v| &v.local_crops[k].image)).collect::<Result<_>>()?;
        Ok(Self {
            batch: bs,
            global,
            masked,
            local,
        })
    }

    pub fn all_positions(&self, n: usize) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..n).collect()
    }
}

/// Gradient-free teacher outputs for one batch.
#[derive(Clone, Debug)]
pub struct TeacherTargets<T> {
    /// Teacher sparse tokens per image (`r × d`), used for matching.
    pub tokens: Vec<Array2<f64>>,
    /// Balanced sparse targets `[B·r, K]`.
    pub sparse: Tensor<T>,
    /// Balanced CLS targets `[B, K_cls]`.
    pub cls: Tensor<T>,
}

fn array_to_tensor<T: Real>(a: &Array2<f64>) -> Tensor<T> {
    Tensor::new(vec![a.nrows(), a.ncols()], a.iter().map(|&v| T::of(v)).collect())
}

/// Runs the teacher on the global views and balances its prototype logits
/// with Sinkhorn-Knopp.
pub fn teacher_targets<T: Real>(
    model: &Model<T>,
    teacher: &ParamStore<T>,
    inputs: &StepInputs<T>,
    config: &TrainConfig,
) -> Result<TeacherTargets<T>> {
    let enc = &model.config().encoder;
    let g = Graph::new();
    let net = Net {
        g: &g,
        store: teacher,
        layout: model.layout(),
        config: model.config(),
    };
    let out = net.encode(&inputs.global, &inputs.all_positions(enc.n()));
    let sparse_logits = g.value(net.logits(out.sparse, &model.layout().sparse_head)).cast::<f64>().to_array2();
    let cls_logits = g.value(net.logits(out.cls, &model.layout().cls_head)).cast::<f64>().to_array2();
    let sparse = sinkhorn_knopp(sparse_logits.view(), config.sk_temperature, config.sk_iters)?;
    let cls = sinkhorn_knopp(cls_logits.view(), config.sk_temperature, config.sk_iters)?;
    let tok = g.value(out.sparse).cast::<f64>();
    let (r, d) = (enc.r, enc.width);
    let tokens = (0..inputs.batch)
        .map(|b| Array2::from_shape_vec((r, d), tok.data()[b * r * d..(b + 1) * r * d].to_vec()).expect("token block"))
        .collect();
    Ok(TeacherTargets {
        tokens,
        sparse: array_to_tensor(&sparse.values),
        cls: array_to_tensor(&cls.values),
    })
}

/// Entropic-OT matching of each image's view tokens (rows) to its teacher
/// tokens, on unit-normalized tokens. Non-finite tokens get the identity
/// so the loss itself reports the problem.
pub fn match_tokens(view_tokens: &[Array2<f64>], teacher_tokens: &[Array2<f64>], ot: &OtConfig, parallel: bool) -> Result<Vec<Matching>> {
    let solve = |(v, t): (&Array2<f64>, &Array2<f64>)| -> Result<Matching> {
        if v.iter().chain(t.iter()).any(|x| !x.is_finite()) {
            return Ok(Matching::identity(v.nrows()));
        }
        let cost = CostMatrix::from_tokens(normalize_rows(v.view()).view(), normalize_rows(t.view()).view())?;
        Ok(extract_matching(&ot.solve(&cost)?))
    };
    if parallel {
        view_tokens.par_iter().zip(teacher_tokens.par_iter()).map(solve).collect()
    } else {
        view_tokens.iter().zip(teacher_tokens).map(solve).collect()
    }
}

/// The assembled objective: graph, total node and per-term values (0 for
/// skipped terms).
pub struct Objective<T: Real> {
    pub graph: Graph<T>,
    pub total: Var,
    pub terms: [f64; 6],
}

/// Builds every enabled loss term for one batch on a fresh graph over the
/// student parameters.
pub fn build_objective<T: Real>(
    model: &Model<T>,
    inputs: &StepInputs<T>,
    targets: Option<&TeacherTargets<T>>,
    config: &TrainConfig,
    parallel: bool,
) -> Result<Objective<T>> {
    let enc = &model.config().encoder;
    let on = config.ablation;
    let w = config.weights;
    let tau = T::of(config.cluster_temperature);
    let needs_targets = on.cluster || on.align || on.cluster_cls || on.align_cls;
    let tg = match (needs_targets, targets) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(StellarError::invalid("enabled clustering terms need teacher targets")),
        (false, _) => None,
    };
    let graph = Graph::new();
    let g = &graph;
    let net = model.net(g);
    let layout = model.layout();
    let mut terms: Vec<(usize, Var)> = Vec::new();

    if on.recon || on.cluster || on.cluster_cls || on.koleo {
        let out = net.encode(&inputs.global, &inputs.all_positions(enc.n()));
        if on.recon {
            let l = net.localize(out.dense, out.sparse);
            let z = g.bmm(l, out.sparse, false);
            let decoded = net.decode(z);
            terms.push((0, g.mse(decoded, &inputs.global)));
        }
        if on.cluster {
            let logits = net.logits(out.sparse, &layout.sparse_head);
            terms.push((1, g.soft_cross_entropy(logits, &tg.expect("targets").sparse, tau)));
        }
        if on.cluster_cls {
            let logits = net.logits(out.cls, &layout.cls_head);
            terms.push((3, g.soft_cross_entropy(logits, &tg.expect("targets").cls, tau)));
        }
        if on.koleo {
            terms.push((5, g.koleo(out.sparse)));
        }
    }

    if on.align && !inputs.masked.is_empty() {
        let tg = tg.expect("targets");
        let ot = OtConfig {
            epsilon: config.ot_epsilon,
            ..OtConfig::default()
        };
        let (r, d) = (enc.r, enc.width);
        let k = tg.sparse.cols();
        let mut parts = Vec::new();
        for (patches, positions) in &inputs.masked {
            let out = net.encode(patches, positions);
            let vals = g.value(out.sparse).cast::<f64>();
            let view_tokens: Vec<Array2<f64>> = (0..inputs.batch)
                .map(|b| Array2::from_shape_vec((r, d), vals.data()[b * r * d..(b + 1) * r * d].to_vec()).expect("token block"))
                .collect();
            let matchings = match_tokens(&view_tokens, &tg.tokens, &ot, parallel)?;
            let mut permuted = Vec::with_capacity(inputs.batch * r * k);
            for (b, m) in matchings.iter().enumerate() {
                for &j in &m.sigma {
                    let row = (b * r + j) * k;
                    permuted.extend_from_slice(&tg.sparse.data()[row..row + k]);
                }
            }
            let logits = net.logits(out.sparse, &layout.sparse_head);
            let target = Tensor::new(vec![inputs.batch * r, k], permuted);
            parts.push(g.soft_cross_entropy(logits, &target, tau));
        }
        let share = T::one() / T::of(parts.len() as f64);
        let parts: Vec<(Var, T)> = parts.into_iter().map(|v| (v, share)).collect();
        terms.push((2, g.weighted_sum(&parts)));
    }

    if on.align_cls && !inputs.local.is_empty() {
        let tg = tg.expect("targets");
        let positions = inputs.all_positions(enc.n());
        let n = T::of(inputs.local.len() as f64);
        let parts: Vec<(Var, T)> = inputs
            .local
            .iter()
            .map(|patches| {
                let out = net.encode(patches, &positions);
                let logits = net.logits(out.cls, &layout.cls_head);
                (g.soft_cross_entropy(logits, &tg.cls, tau), T::one() / n)
            })
            .collect();
        terms.push((4, g.weighted_sum(&parts)));
    }

    let weights = w.as_array();
    let mut values = [0.0; 6];
    for &(i, v) in &terms {
        values[i] = g.item(v).f64();
    }
    let weighted: Vec<(Var, T)> = terms.iter().map(|&(i, v)| (v, T::of(weights[i]))).collect();
    let total = g.weighted_sum(&weighted);
    Ok(Objective {
        graph,
        total,
        terms: values,
    })
}
