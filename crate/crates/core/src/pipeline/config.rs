//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, StellarError};
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::objectives::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    SyntheticShapes,
    Cifar10Binary,
    ImageFolder,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::SyntheticShapes => "synthetic-shapes",
            DatasetKind::Cifar10Binary => "cifar10-binary",
            DatasetKind::ImageFolder => "image-folder",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = StellarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-shapes" => Ok(DatasetKind::SyntheticShapes),
            "cifar10-binary" => Ok(DatasetKind::Cifar10Binary),
            "image-folder" => Ok(DatasetKind::ImageFolder),
            other => Err(StellarError::UnsupportedFormat(format!("dataset kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = StellarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(StellarError::invalid(format!("split must be train or test, got `{other}`"))),
        }
    }
}

/// Where images come from. `seed` drives synthetic generation; `limit`
/// truncates any source (0 keeps everything; synthetic sources need it).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSource {
    pub kind: DatasetKind,
    pub root: PathBuf,
    pub seed: u64,
    pub limit: usize,
    pub split: Split,
}

impl DatasetSource {
    pub fn synthetic(seed: u64, count: usize, split: Split) -> Self {
        Self {
            kind: DatasetKind::SyntheticShapes,
            root: PathBuf::new(),
            seed,
            limit: count,
            split,
        }
    }

    /// Parses `synthetic:SEED:COUNT`, `cifar10:DIR[:LIMIT]` or
    /// `folder:DIR[:LIMIT]`, with an optional `@test` suffix.
    pub fn parse(spec: &str) -> Result<Self> {
        let (body, split) = match spec.rsplit_once('@') {
            Some((b, s)) => (b, s.parse()?),
            None => (spec, Split::Train),
        };
        let bad = || StellarError::invalid(format!("cannot parse data source `{spec}`"));
        let (kind, rest) = body.split_once(':').ok_or_else(bad)?;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        match kind {
            "synthetic" => {
                let (seed, count) = rest.split_once(':').ok_or_else(bad)?;
                Ok(Self::synthetic(seed.parse().map_err(|_| bad())?, num(count)?, split))
            }
            "cifar10" | "folder" => {
                let (root, limit) = match rest.rsplit_once(':') {
                    Some((r, l)) if l.parse::<usize>().is_ok() => (r, num(l)?),
                    _ => (rest, 0),
                };
                Ok(Self {
                    kind: if kind == "cifar10" { DatasetKind::Cifar10Binary } else { DatasetKind::ImageFolder },
                    root: PathBuf::from(root),
                    seed: 0,
                    limit,
                    split,
                })
            }
            _ => Err(StellarError::UnsupportedFormat(format!("data source kind `{kind}`"))),
        }
    }
}

/// Which loss terms are computed. A disabled term is skipped entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub recon: bool,
    pub cluster: bool,
    pub align: bool,
    pub cluster_cls: bool,
    pub align_cls: bool,
    pub koleo: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::all(true)
    }
}

impl Ablation {
    pub fn all(on: bool) -> Self {
        Self {
            recon: on,
            cluster: on,
            align: on,
            cluster_cls: on,
            align_cls: on,
            koleo: on,
        }
    }

    pub fn only_recon() -> Self {
        Self {
            recon: true,
            ..Self::all(false)
        }
    }

    pub fn from_array(a: [bool; 6]) -> Self {
        Self {
            recon: a[0],
            cluster: a[1],
            align: a[2],
            cluster_cls: a[3],
            align_cls: a[4],
            koleo: a[5],
        }
    }

    pub fn as_array(&self) -> [bool; 6] {
        [self.recon, self.cluster, self.align, self.cluster_cls, self.align_cls, self.koleo]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Stops after this many optimizer steps when nonzero.
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_ramp_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub sk_iters: usize,
    pub sk_temperature: f64,
    pub cluster_temperature: f64,
    /// `None` picks the OT epsilon from each cost matrix.
    pub ot_epsilon: Option<f64>,
    pub n_masked_views: usize,
    pub n_local_crops: usize,
    pub mask_ratio_warmup: f64,
    pub mask_ratio_standard: f64,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub seed: u64,
    pub dataset: DatasetSource,
    /// Checkpoint interval in steps (0 writes only the initial and final ones).
    pub checkpoint_every: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            epochs: 30,
            warmup_epochs: 10,
            max_steps: 0,
            batch_size: 128,
            lr: 1.5e-4,
            lr_ramp_epochs: 2,
            weight_decay: 0.05,
            momentum: 0.996,
            sk_iters: 3,
            sk_temperature: 0.05,
            cluster_temperature: 0.1,
            ot_epsilon: None,
            n_masked_views: 6,
            n_local_crops: 6,
            mask_ratio_warmup: 0.6,
            mask_ratio_standard: 0.8,
            global_scale: (0.36, 1.0),
            local_scale: (0.06, 0.36),
            seed: 0,
            dataset: DatasetSource::synthetic(0, 10_000, Split::Train),
            checkpoint_every: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// A configuration small enough to train in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    image_size: 16,
                    patch_size: 4,
                    width: 32,
                    depth: 2,
                    heads: 2,
                    r: 8,
                    projector_dim: 32,
                    k_sparse: 64,
                    k_cls: 32,
                    tau_spatial: 0.06,
                },
                decoder: DecoderConfig {
                    width: 32,
                    depth: 2,
                    heads: 2,
                },
            },
            epochs: 30,
            warmup_epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            momentum: 0.99,
            n_masked_views: 2,
            n_local_crops: 2,
            dataset: DatasetSource::synthetic(0, 1024, Split::Train),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let fail = |m: &str| Err(StellarError::invalid(m.to_string()));
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs must not exceed epochs");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        let positive = [self.lr, self.sk_temperature, self.cluster_temperature];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.weight_decay < 0.0 {
            return fail("rates and temperatures must be positive");
        }
        if self.ot_epsilon.is_some_and(|e| !(e > 0.0)) {
            return fail("ot_epsilon must be positive");
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1]");
        }
        if self.sk_iters == 0 {
            return fail("sk_iters must be positive");
        }
        for r in [self.mask_ratio_warmup, self.mask_ratio_standard] {
            if !(0.0..1.0).contains(&r) {
                return fail("mask ratios must lie in [0, 1)");
            }
        }
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return fail("crop scales must satisfy 0 < low <= high <= 1");
            }
        }
        Ok(())
    }

    /// Masking ratio in force during `epoch`.
    pub fn mask_ratio(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.mask_ratio_warmup
        } else {
            self.mask_ratio_standard
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| StellarError::Config { line: i + 1, reason };
            let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StellarError::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    fn get(&self, key: &str) -> Option<String> {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let w = &self.weights;
        let a = &self.ablation;
        let f = |v: f64| format!("{v:?}");
        Some(match key {
            "image_size" => e.image_size.to_string(),
            "patch_size" => e.patch_size.to_string(),
            "width" => e.width.to_string(),
            "depth" => e.depth.to_string(),
            "heads" => e.heads.to_string(),
            "r" => e.r.to_string(),
            "projector_dim" => e.projector_dim.to_string(),
            "k_sparse" => e.k_sparse.to_string(),
            "k_cls" => e.k_cls.to_string(),
            "tau_spatial" => f(e.tau_spatial),
            "decoder_width" => d.width.to_string(),
            "decoder_depth" => d.depth.to_string(),
            "decoder_heads" => d.heads.to_string(),
            "w_recon" => f(w.recon),
            "w_cluster" => f(w.cluster),
            "w_align" => f(w.align),
            "w_cluster_cls" => f(w.cluster_cls),
            "w_align_cls" => f(w.align_cls),
            "w_koleo" => f(w.koleo),
            "use_recon" => a.recon.to_string(),
            "use_cluster" => a.cluster.to_string(),
            "use_align" => a.align.to_string(),
            "use_cluster_cls" => a.cluster_cls.to_string(),
            "use_align_cls" => a.align_cls.to_string(),
            "use_koleo" => a.koleo.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => f(self.lr),
            "lr_ramp_epochs" => self.lr_ramp_epochs.to_string(),
            "weight_decay" => f(self.weight_decay),
            "momentum" => f(self.momentum),
            "sk_iters" => self.sk_iters.to_string(),
            "sk_temperature" => f(self.sk_temperature),
            "cluster_temperature" => f(self.cluster_temperature),
            "ot_epsilon" => self.ot_epsilon.map_or("auto".into(), f),
            "n_masked_views" => self.n_masked_views.to_string(),
            "n_local_crops" => self.n_local_crops.to_string(),
            "mask_ratio_warmup" => f(self.mask_ratio_warmup),
            "mask_ratio_standard" => f(self.mask_ratio_standard),
            "global_scale_min" => f(self.global_scale.0),
            "global_scale_max" => f(self.global_scale.1),
            "local_scale_min" => f(self.local_scale.0),
            "local_scale_max" => f(self.local_scale.1),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.kind.as_str().into(),
            "data_root" => self.dataset.root.display().to_string(),
            "data_seed" => self.dataset.seed.to_string(),
            "data_limit" => self.dataset.limit.to_string(),
            "data_split" => self.dataset.split.as_str().into(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => return None,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| StellarError::invalid(format!("bad value `{v}` for {key}")))
        }
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        let w = &mut self.weights;
        let a = &mut self.ablation;
        let v = value;
        match key {
            "image_size" => e.image_size = p(key, v)?,
            "patch_size" => e.patch_size = p(key, v)?,
            "width" => e.width = p(key, v)?,
            "depth" => e.depth = p(key, v)?,
            "heads" => e.heads = p(key, v)?,
            "r" => e.r = p(key, v)?,
            "projector_dim" => e.projector_dim = p(key, v)?,
            "k_sparse" => e.k_sparse = p(key, v)?,
            "k_cls" => e.k_cls = p(key, v)?,
            "tau_spatial" => e.tau_spatial = p(key, v)?,
            "decoder_width" => d.width = p(key, v)?,
            "decoder_depth" => d.depth = p(key, v)?,
            "decoder_heads" => d.heads = p(key, v)?,
            "w_recon" => w.recon = p(key, v)?,
            "w_cluster" => w.cluster = p(key, v)?,
            "w_align" => w.align = p(key, v)?,
            "w_cluster_cls" => w.cluster_cls = p(key, v)?,
            "w_align_cls" => w.align_cls = p(key, v)?,
            "w_koleo" => w.koleo = p(key, v)?,
            "use_recon" => a.recon = p(key, v)?,
            "use_cluster" => a.cluster = p(key, v)?,
            "use_align" => a.align = p(key, v)?,
            "use_cluster_cls" => a.cluster_cls = p(key, v)?,
            "use_align_cls" => a.align_cls = p(key, v)?,
            "use_koleo" => a.koleo = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "warmup_epochs" => self.warmup_epochs = p(key, v)?,
            "max_steps" => self.max_steps = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "lr_ramp_epochs" => self.lr_ramp_epochs = p(key, v)?,
            "weight_decay" => self.weight_decay = p(key, v)?,
            "momentum" => self.momentum = p(key, v)?,
            "sk_iters" => self.sk_iters = p(key, v)?,
            "sk_temperature" => self.sk_temperature = p(key, v)?,
            "cluster_temperature" => self.cluster_temperature = p(key, v)?,
            "ot_epsilon" => self.ot_epsilon = if v == "auto" { None } else { Some(p(key, v)?) },
            "n_masked_views" => self.n_masked_views = p(key, v)?,
            "n_local_crops" => self.n_local_crops = p(key, v)?,
            "mask_ratio_warmup" => self.mask_ratio_warmup = p(key, v)?,
            "mask_ratio_standard" => self.mask_ratio_standard = p(key, v)?,
            "global_scale_min" => self.global_scale.0 = p(key, v)?,
            "global_scale_max" => self.global_scale.1 = p(key, v)?,
            "local_scale_min" => self.local_scale.0 = p(key, v)?,
            "local_scale_max" => self.local_scale.1 = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "dataset" => self.dataset.kind = v.parse()?,
            "data_root" => self.dataset.root = PathBuf::from(v),
            "data_seed" => self.dataset.seed = p(key, v)?,
            "data_limit" => self.dataset.limit = p(key, v)?,
            "data_split" => self.dataset.split = v.parse()?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "deterministic" => self.deterministic = p(key, v)?,
            _ => return Err(StellarError::invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

const KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "width",
    "depth",
    "heads",
    "r",
    "projector_dim",
    "k_sparse",
    "k_cls",
    "tau_spatial",
    "decoder_width",
    "decoder_depth",
    "decoder_heads",
    "w_recon",
    "w_cluster",
    "w_align",
    "w_cluster_cls",
    "w_align_cls",
    "w_koleo",
    "use_recon",
    "use_cluster",
    "use_align",
    "use_cluster_cls",
    "use_align_cls",
    "use_koleo",
    "epochs",
    "warmup_epochs",
    "max_steps",
    "batch_size",
    "lr",
    "lr_ramp_epochs",
    "weight_decay",
    "momentum",
    "sk_iters",
    "sk_temperature",
    "cluster_temperature",
    "ot_epsilon",
    "n_masked_views",
    "n_local_crops",
    "mask_ratio_warmup",
    "mask_ratio_standard",
    "global_scale_min",
    "global_scale_max",
    "local_scale_min",
    "local_scale_max",
    "seed",
    "dataset",
    "data_root",
    "data_seed",
    "data_limit",
    "data_split",
    "checkpoint_every",
    "deterministic",
];
