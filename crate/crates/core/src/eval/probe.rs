use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::FeatureSource;
use crate::error::{Result, StellarError};
use crate::objectives::normalize_rows;
use crate::pipeline::{mix, AdamW};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor};

pub const PROBE_CSV_HEADER: &str = "source,lr,batch,val_accuracy,test_accuracy";
pub const KNN_CSV_HEADER: &str = "source,k,accuracy";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Per-sample normalization over features with a learned affine map.
    LayerStyle,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub feature_source: FeatureSource,
    pub normalization: Normalization,
    pub lrs: Vec<f64>,
    pub batches: Vec<usize>,
    pub epochs: usize,
    /// Fraction of the training features held out for model selection.
    pub val_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            feature_source: FeatureSource::SparseMean,
            normalization: Normalization::LayerStyle,
            lrs: vec![1e-4, 5e-4, 1e-3, 5e-3],
            batches: vec![128, 512],
            epochs: 100,
            val_fraction: 0.1,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(StellarError::invalid("probe val_fraction must lie in (0, 1)"));
        }
        if self.lrs.is_empty() || self.batches.is_empty() {
            return Err(StellarError::invalid("probe grids must be nonempty"));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0)) || self.batches.contains(&0) || self.epochs == 0 {
            return Err(StellarError::invalid("probe learning rates, batch sizes and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeRow {
    pub lr: f64,
    pub batch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// Test accuracy (percent) of the selected grid point, or its validation
    /// accuracy when no test split was given.
    pub accuracy: f64,
    pub best_lr: f64,
    pub best_batch: usize,
    pub table: Vec<ProbeRow>,
}

impl ProbeResult {
    pub fn to_csv(&self, source: FeatureSource) -> String {
        let mut out = format!("{PROBE_CSV_HEADER}\n");
        for row in &self.table {
            let test = row.test_accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:?},{},{:?},{test}", source.as_str(), row.lr, row.batch, row.val_accuracy);
        }
        out
    }
}

struct Classifier {
    store: ParamStore<f64>,
    norm: Option<(ParamId, ParamId)>,
    w: ParamId,
    b: ParamId,
}

impl Classifier {
    fn new(dim: usize, classes: usize, normalization: Normalization) -> Self {
        let mut store = ParamStore::new();
        let norm = match normalization {
            Normalization::LayerStyle => Some((
                store.insert("norm.g", Tensor::full(&[dim], 1.0)),
                store.insert("norm.b", Tensor::zeros(&[dim])),
            )),
            Normalization::None => None,
        };
        let w = store.insert("w", Tensor::zeros(&[dim, classes]));
        let b = store.insert("b", Tensor::zeros(&[classes]));
        Self { store, norm, w, b }
    }

    fn logits(&self, g: &Graph<f64>, x: ArrayView2<f64>) -> crate::tensor::Var {
        let mut h = g.constant(Tensor::from_array2(&x.to_owned()));
        if let Some((ng, nb)) = self.norm {
            h = g.layer_norm(h, g.param(&self.store, ng), g.param(&self.store, nb));
        }
        g.linear(h, g.param(&self.store, self.w), g.param(&self.store, self.b))
    }

    fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        let g = Graph::new();
        let z = g.value(self.logits(&g, x)).to_array2();
        z.axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn train_classifier(
    x: &Array2<f64>,
    y: &[usize],
    classes: usize,
    lr: f64,
    batch: usize,
    config: &ProbeConfig,
) -> Result<Classifier> {
    let mut clf = Classifier::new(x.ncols(), classes, config.normalization);
    let mut opt = AdamW::new(&clf.store, config.weight_decay);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, batch as u64 ^ lr.to_bits()));
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let g = Graph::new();
            let z = clf.logits(&g, rows(x, idx).view());
            let mut target = Tensor::zeros(&[idx.len(), classes]);
            for (i, &j) in idx.iter().enumerate() {
                target.data_mut()[i * classes + y[j]] = 1.0;
            }
            let loss = g.soft_cross_entropy(z, &target, 1.0);
            let grads = g.backward(loss).param_grads(&clf.store);
            opt.update(&mut clf.store, &grads, lr)?;
        }
    }
    Ok(clf)
}

fn check_table(x: &Array2<f64>, y: &[usize], what: &str) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(StellarError::Probe(format!("{what}: {} feature rows but {} labels", x.nrows(), y.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(StellarError::Probe(format!("{what}: features must be finite")));
    }
    Ok(())
}

fn distinct(y: &[usize]) -> usize {
    let mut v = y.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Softmax-regression probe over the `lrs × batches` grid. The grid point
/// with the best accuracy on a held-out slice of the training features is
/// selected (earliest on ties); `test` is only scored, never consulted.
pub fn linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    test: Option<(&Array2<f64>, &[usize])>,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    config.validate()?;
    check_table(features, labels, "train")?;
    if let Some((tx, ty)) = test {
        check_table(tx, ty, "test")?;
        if tx.ncols() != features.ncols() {
            return Err(StellarError::Probe("train and test feature widths differ".into()));
        }
    }
    if distinct(labels) < 2 {
        return Err(StellarError::Probe("linear probe needs at least two classes".into()));
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_val = ((labels.len() as f64 * config.val_fraction).round() as usize).clamp(1, labels.len() - 1);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let (xf, xv) = (rows(features, fit_idx), rows(features, val_idx));
    let yf: Vec<usize> = fit_idx.iter().map(|&i| labels[i]).collect();
    let yv: Vec<usize> = val_idx.iter().map(|&i| labels[i]).collect();
    if distinct(&yf) < 2 {
        return Err(StellarError::Probe("training split holds a single class".into()));
    }
    let grid: Vec<(f64, usize)> = config.lrs.iter().flat_map(|&lr| config.batches.iter().map(move |&b| (lr, b))).collect();
    let table: Vec<ProbeRow> = grid
        .par_iter()
        .map(|&(lr, batch)| {
            let clf = train_classifier(&xf, &yf, classes, lr, batch, config)?;
            Ok(ProbeRow {
                lr,
                batch,
                val_accuracy: accuracy(&clf.predict(xv.view()), &yv),
                test_accuracy: test.map(|(tx, ty)| accuracy(&clf.predict(tx.view()), ty)),
            })
        })
        .collect::<Result<_>>()?;
    let best = table
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.val_accuracy.partial_cmp(&b.1.val_accuracy).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
        .map(|(_, r)| *r)
        .expect("nonempty grid");
    Ok(ProbeResult {
        accuracy: best.test_accuracy.unwrap_or(best.val_accuracy),
        best_lr: best.lr,
        best_batch: best.batch,
        table,
    })
}

/// Cosine k-nearest-neighbour vote, in percent. Neighbour ties go to the
/// lower training index; vote ties to the larger similarity sum, then the
/// lower class.
pub fn knn_probe(
    train: &Array2<f64>,
    train_labels: &[usize],
    test: &Array2<f64>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    check_table(train, train_labels, "train")?;
    check_table(test, test_labels, "test")?;
    if k == 0 || k >= train.nrows() {
        return Err(StellarError::Probe(format!("k must lie in [1, {}), got {k}", train.nrows())));
    }
    if train.ncols() != test.ncols() {
        return Err(StellarError::Probe("train and test feature widths differ".into()));
    }
    let a = normalize_rows(train.view());
    let b = normalize_rows(test.view());
    let sims = b.dot(&a.t());
    let classes = train_labels.iter().max().copied().unwrap_or(0) + 1;
    let pred: Vec<usize> = (0..sims.nrows())
        .into_par_iter()
        .map(|t| {
            let row = sims.row(t);
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&i, &j| row[j].partial_cmp(&row[i]).unwrap_or(Ordering::Equal).then(i.cmp(&j)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &i in &idx[..k] {
                votes[train_labels[i]].0 += 1;
                votes[train_labels[i]].1 += row[i];
            }
            (0..classes)
                .max_by(|&c, &d| {
                    votes[c]
                        .0
                        .cmp(&votes[d].0)
                        .then(votes[c].1.partial_cmp(&votes[d].1).unwrap_or(Ordering::Equal))
                        .then(d.cmp(&c))
                })
                .unwrap_or(0)
        })
        .collect();
    Ok(accuracy(&pred, test_labels))
}
