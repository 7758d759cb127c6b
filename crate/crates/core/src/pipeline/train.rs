//! Optimizer, training state, the single training step and the epoch loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::{load_dataset, mix, Dataset};
use super::objective::{build_objective, teacher_targets, StepInputs};
use super::views::{make_views, ViewBatch};
use crate::error::{Result, StellarError};
use crate::model::{ema_update_in_place, read_checkpoint, write_checkpoint, Model};
use crate::objectives::{total_objective, LossBreakdown, LOSS_CSV_HEADER};
use crate::tensor::{ParamStore, Real, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
const PREFETCH: usize = 2;

/// Decoupled weight decay Adam. Decay applies to matrices only.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(StellarError::shape("AdamW::update", params.len(), grads.len()));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::of(lr), T::of(self.eps));
        let one = T::one();
        for id in params.ids().collect::<Vec<_>>() {
            let p = params.get_mut(id);
            let g = &grads[id.0];
            if g.shape() != p.shape() {
                return Err(StellarError::shape("AdamW::update", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
            let decay = if p.rank() >= 2 { T::of(1.0 - lr * self.weight_decay) } else { one };
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let step = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w = *w * decay - lr_t * step;
            }
        }
        Ok(())
    }
}

/// Everything a training run carries from step to step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Student encoder, heads and decoder.
    pub model: Model<f32>,
    /// EMA shadow of the student prefix of `model.params`.
    pub teacher: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
}

impl TrainState {
    /// Fresh student from `config.seed`; the teacher starts as its copy.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let model = Model::init(&config.model, config.seed)?;
        let teacher = model.student_params();
        let optimizer = AdamW::new(&model.params, config.weight_decay);
        Ok(Self {
            model,
            teacher,
            optimizer,
            step: 0,
        })
    }

    /// The teacher weights in a full model (decoder from the student).
    pub fn teacher_model(&self) -> Result<Model<f32>> {
        self.model.with_student(&self.teacher)
    }

    pub fn records(&self, config: &TrainConfig) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.model.records();
        out.extend(self.teacher.iter().map(|(_, name, t)| (format!("teacher.{name}"), t.clone())));
        for (id, name, _) in self.model.params.iter() {
            out.push((format!("optim.m.{name}"), self.optimizer.m[id.0].clone()));
            out.push((format!("optim.v.{name}"), self.optimizer.v[id.0].clone()));
        }
        // u64 counters survive f32 storage as four 16-bit pieces.
        let pieces = |x: u64| Tensor::new(vec![4], (0..4).map(|i| ((x >> (16 * i)) & 0xFFFF) as f32).collect());
        out.push(("meta.step".into(), pieces(self.step)));
        out.push(("meta.optim_t".into(), pieces(self.optimizer.t)));
        let text = config.to_text();
        out.push((
            "meta.config".into(),
            Tensor::new(vec![text.len()], text.bytes().map(f32::from).collect()),
        ));
        out
    }

    pub fn save(&self, config: &TrainConfig, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.records(config))
    }

    /// Restores a state written by [`save`](Self::save) for a model shaped
    /// like `config.model`.
    pub fn load(config: &TrainConfig, path: &Path) -> Result<Self> {
        let records = read_checkpoint(path)?;
        let bad = |reason: String| StellarError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut state = Self::init(config)?;
        state.model.load_records(&records).map_err(|e| bad(e.to_string()))?;
        let by_name: std::collections::HashMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |key: String, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = by_name.get(key.as_str()).ok_or_else(|| bad(format!("missing record {key}")))?;
            if t.shape() != shape {
                return Err(bad(format!("record {key} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok((*t).clone())
        };
        for id in state.teacher.ids().collect::<Vec<_>>() {
            let name = state.teacher.name(id).to_string();
            let shape = state.teacher.get(id).shape().to_vec();
            *state.teacher.get_mut(id) = fetch(format!("teacher.{name}"), &shape)?;
        }
        for (id, name, t) in state.model.params.iter() {
            state.optimizer.m[id.0] = fetch(format!("optim.m.{name}"), t.shape())?;
            state.optimizer.v[id.0] = fetch(format!("optim.v.{name}"), t.shape())?;
        }
        let counter = |key: &str| -> Result<u64> {
            let t = fetch(key.to_string(), &[4])?;
            Ok(t.data().iter().enumerate().fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))))
        };
        state.step = counter("meta.step")?;
        state.optimizer.t = counter("meta.optim_t")?;
        Ok(state)
    }
}

/// The configuration text stored in a training checkpoint.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let records = read_checkpoint(path)?;
    let (_, t) = records
        .iter()
        .find(|(n, _)| n == "meta.config")
        .ok_or_else(|| StellarError::Checkpoint {
            path: path.to_path_buf(),
            reason: "no meta.config record".into(),
        })?;
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|e| StellarError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    TrainConfig::from_text(&text)
}

/// Whether runs must be serial and bitwise reproducible: set by the config
/// or by `STELLAR_DETERMINISTIC=1`.
pub fn deterministic(config: &TrainConfig) -> bool {
    config.deterministic || std::env::var("STELLAR_DETERMINISTIC").is_ok_and(|v| v == "1")
}

/// One optimizer step on `views`. On a non-finite loss the state is left
/// untouched and the offending term is named.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, views: &[ViewBatch], lr: f64) -> Result<LossBreakdown> {
    if views.is_empty() {
        return Err(StellarError::invalid("train_step needs a nonempty batch"));
    }
    let parallel = !deterministic(config);
    let inputs = StepInputs::<f32>::from_views(&state.model, views)?;
    let on = config.ablation;
    let targets = if on.cluster || on.align || on.cluster_cls || on.align_cls {
        Some(teacher_targets(&state.model, &state.teacher, &inputs, config)?)
    } else {
        None
    };
    let objective = build_objective(&state.model, &inputs, targets.as_ref(), config, parallel)?;
    let breakdown = total_objective(objective.terms, &config.weights).map_err(|e| match e {
        StellarError::NonFiniteLoss { term, .. } => StellarError::NonFiniteLoss { term, step: state.step },
        other => other,
    })?;
    let grads = objective.graph.backward(objective.total).param_grads(&state.model.params);
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(StellarError::NonFiniteLoss {
            term: "gradient",
            step: state.step,
        });
    }
    state.optimizer.update(&mut state.model.params, &grads, lr)?;
    ema_update_in_place(&mut state.teacher, &state.model.params, config.momentum)?;
    state.step += 1;
    Ok(breakdown)
}

/// Optimizer steps per epoch: full batches only, at least one.
pub fn steps_per_epoch(config: &TrainConfig, dataset_len: usize) -> u64 {
    (dataset_len / config.batch_size.max(1)).max(1) as u64
}

pub fn total_steps(config: &TrainConfig, dataset_len: usize) -> u64 {
    let full = config.epochs as u64 * steps_per_epoch(config, dataset_len);
    if config.max_steps > 0 {
        full.min(config.max_steps)
    } else {
        full
    }
}

/// Linear ramp over `lr_ramp_epochs`, then cosine decay to zero at the end
/// of the full epoch schedule.
pub fn learning_rate(config: &TrainConfig, step: u64, dataset_len: usize) -> f64 {
    let spe = steps_per_epoch(config, dataset_len);
    let total = (config.epochs as u64 * spe).max(1);
    let ramp = (config.lr_ramp_epochs as u64 * spe).min(total);
    if step < ramp {
        return config.lr * (step + 1) as f64 / ramp as f64;
    }
    let progress = (step - ramp) as f64 / (total - ramp).max(1) as f64;
    config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Dataset indices of the batch used at `step`. Each epoch reshuffles from
/// `(seed, epoch)`.
pub fn batch_indices(config: &TrainConfig, step: u64, dataset_len: usize) -> Vec<usize> {
    let spe = steps_per_epoch(config, dataset_len);
    let (epoch, pos) = (step / spe, (step % spe) as usize);
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch)));
    let bs = config.batch_size.min(dataset_len);
    order[pos * bs..(pos + 1) * bs].to_vec()
}

/// Views for the batch at `step`. Every image draws from its own stream
/// seeded by `(seed, step, index)`, so the result is independent of
/// scheduling.
pub fn batch_views(config: &TrainConfig, dataset: &Dataset, step: u64, parallel: bool) -> Vec<ViewBatch> {
    let spe = steps_per_epoch(config, dataset.len());
    let ratio = config.mask_ratio((step / spe) as usize);
    let view = |&i: &usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(config.seed, step), i as u64));
        make_views(&dataset.images[i], config, ratio, &mut rng)
    };
    let idx = batch_indices(config, step, dataset.len());
    if parallel {
        idx.par_iter().map(view).collect()
    } else {
        idx.iter().map(view).collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step}.stlr"))
}

/// Outcome of [`run_training`].
#[derive(Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Breakdowns of the steps run by this call.
    pub losses: Vec<LossBreakdown>,
}

fn write_err(step: u64) -> impl Fn(std::io::Error) -> StellarError {
    move |source| StellarError::Write { step, source }
}

fn save_at(state: &TrainState, config: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    let path = checkpoint_path(dir, state.step);
    state.save(config, &path).map_err(|e| match e {
        StellarError::Io(source) => StellarError::Write { step: state.step, source },
        StellarError::Checkpoint { reason, .. } => StellarError::Write {
            step: state.step,
            source: std::io::Error::other(reason),
        },
        other => other,
    })?;
    Ok(path)
}

/// Runs (or resumes) training in `out_dir`, writing `metrics.csv` and
/// `checkpoint-<step>.stlr` files. With `epochs = 0` only the initial
/// checkpoint is written.
pub fn run_training(config: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainReport> {
    config.validate()?;
    let dataset = load_dataset(&config.dataset, config.model.encoder.image_size)?;
    if dataset.is_empty() {
        return Err(StellarError::invalid("training dataset is empty"));
    }
    fs::create_dir_all(out_dir).map_err(write_err(0))?;
    let mut state = match resume {
        Some(path) => TrainState::load(config, path)?,
        None => TrainState::init(config)?,
    };
    let metrics = out_dir.join(METRICS_FILE);
    let mut log = if resume.is_some() && metrics.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics).map_err(write_err(state.step))?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics).map_err(write_err(state.step))?);
        writeln!(w, "{LOSS_CSV_HEADER}").map_err(write_err(state.step))?;
        w
    };
    let mut last = if resume.is_none() {
        Some(save_at(&state, config, out_dir)?)
    } else {
        None
    };
    let end = total_steps(config, dataset.len());
    let parallel = !deterministic(config);
    let start = state.step;
    let mut losses = Vec::new();
    log::info!("training steps {start}..{end} on {} images", dataset.len());

    let result: Result<()> = std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Vec<ViewBatch>>(PREFETCH);
        if parallel {
            let dataset = &dataset;
            scope.spawn(move || {
                for step in start..end {
                    if tx.send(batch_views(config, dataset, step, true)).is_err() {
                        break;
                    }
                }
            });
        }
        let mut pending = None;
        for step in start..end {
            let views = if parallel {
                rx.recv().map_err(|_| StellarError::invalid("augmentation worker stopped"))?
            } else {
                batch_views(config, &dataset, step, false)
            };
            let lr = learning_rate(config, step, dataset.len());
            let breakdown = match train_step(&mut state, config, &views, lr) {
                Ok(b) => b,
                Err(e) => {
                    pending = Some(e);
                    break;
                }
            };
            writeln!(log, "{}", breakdown.csv_row(state.step)).map_err(write_err(state.step))?;
            if state.step % 50 == 0 || state.step == end {
                log::info!("step {} lr {lr:.2e} loss {:.4}", state.step, breakdown.total);
                log.flush().map_err(write_err(state.step))?;
            }
            losses.push(breakdown);
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                last = Some(save_at(&state, config, out_dir)?);
            }
        }
        drop(rx);
        match pending {
            Some(e) => {
                // Keep the last good state on disk before surfacing the error.
                log.flush().map_err(write_err(state.step))?;
                save_at(&state, config, out_dir)?;
                Err(e)
            }
            None => Ok(()),
        }
    });
    result?;
    log.flush().map_err(write_err(state.step))?;
    let final_checkpoint = match last {
        Some(p) if p == checkpoint_path(out_dir, state.step) => p,
        _ => save_at(&state, config, out_dir)?,
    };
    Ok(TrainReport {
        state,
        final_checkpoint,
        metrics,
        losses,
    })
}
