//! Frozen-feature evaluation: feature extraction, linear and kNN probes and
//! the rank sweep.

mod probe;
pub mod selftest;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rayon::prelude::*;

pub use probe::{knn_probe, linear_probe, Normalization, ProbeConfig, ProbeResult, ProbeRow, KNN_CSV_HEADER, PROBE_CSV_HEADER};

use crate::error::{Result, StellarError};
use crate::model::Model;
use crate::pipeline::{checkpoint_config, run_training, Dataset, TrainConfig};
use crate::raster::Image;
use crate::tensor::Real;

pub const SWEEP_CSV_HEADER: &str = "r,recon_mse,probe_accuracy";
const CHUNK: usize = 64;

/// Which encoder output a per-image feature vector pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureSource {
    SparseMean,
    Cls,
    DenseMean,
}

impl FeatureSource {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureSource::SparseMean => "sparse-mean",
            FeatureSource::Cls => "cls",
            FeatureSource::DenseMean => "dense-mean",
        }
    }
}

impl FromStr for FeatureSource {
    type Err = StellarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse-mean" => Ok(FeatureSource::SparseMean),
            "cls" => Ok(FeatureSource::Cls),
            "dense-mean" => Ok(FeatureSource::DenseMean),
            other => Err(StellarError::invalid(format!(
                "unknown feature source `{other}` (expected sparse-mean, cls or dense-mean)"
            ))),
        }
    }
}

/// The student model stored in a training checkpoint.
pub fn load_model(path: &Path) -> Result<(TrainConfig, Model<f32>)> {
    let config = checkpoint_config(path)?;
    let mut model = Model::init(&config.model, config.seed)?;
    let records = crate::model::read_checkpoint(path)?;
    model.load_records(&records).map_err(|e| StellarError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((config, model))
}

/// One pooled feature row per image, encoder in eval mode on full images.
/// Chunks are encoded independently, so the table does not depend on
/// `parallel`.
pub fn extract_features<T: Real>(model: &Model<T>, images: &[Image], source: FeatureSource, parallel: bool) -> Result<Array2<f64>> {
    let d = model.config().encoder.width;
    let chunk = |imgs: &[Image]| -> Result<Vec<f64>> {
        let outs = model.encode_batch(imgs, None)?;
        Ok(outs
            .into_iter()
            .flat_map(|o| match source {
                FeatureSource::SparseMean => o.sparse.values.mean_axis(Axis(0)).expect("r ≥ 1").to_vec(),
                FeatureSource::Cls => o.cls.to_vec(),
                FeatureSource::DenseMean => o.dense.mean_axis(Axis(0)).expect("n ≥ 1").to_vec(),
            })
            .collect())
    };
    let parts: Vec<Vec<f64>> = if parallel {
        images.par_chunks(CHUNK).map(chunk).collect::<Result<_>>()?
    } else {
        images.chunks(CHUNK).map(chunk).collect::<Result<_>>()?
    };
    let flat: Vec<f64> = parts.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((images.len(), d), flat).expect("feature table shape"))
}

/// Mean per-pixel squared error of `decode(L·S)` against each image.
pub fn reconstruction_mse<T: Real>(model: &Model<T>, images: &[Image], parallel: bool) -> Result<f64> {
    if images.is_empty() {
        return Err(StellarError::invalid("reconstruction_mse needs images"));
    }
    let one = |img: &Image| -> Result<f64> {
        let rec = model.reconstruct(img)?;
        let n = img.data().len() as f64;
        Ok(rec.data().iter().zip(img.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / n)
    };
    let errs: Vec<f64> = if parallel {
        images.par_iter().map(one).collect::<Result<_>>()?
    } else {
        images.iter().map(one).collect::<Result<_>>()?
    };
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankRow {
    pub r: usize,
    pub recon_mse: f64,
    pub probe_accuracy: f64,
}

/// Trains one model per `r` (everything else fixed) under `out_dir/r<r>`
/// and reports held-out reconstruction error and sparse-mean probe accuracy.
pub fn rank_sweep(
    base: &TrainConfig,
    r_values: &[usize],
    out_dir: &Path,
    train: &Dataset,
    test: &Dataset,
    probe: &ProbeConfig,
) -> Result<Vec<RankRow>> {
    if r_values.is_empty() {
        return Err(StellarError::invalid("rank_sweep needs at least one r"));
    }
    let parallel = !crate::pipeline::deterministic(base);
    r_values
        .iter()
        .map(|&r| {
            let mut config = base.clone();
            config.model.encoder.r = r;
            let report = run_training(&config, &out_dir.join(format!("r{r}")), None)?;
            let model = &report.state.model;
            let recon_mse = reconstruction_mse(model, &test.images, parallel)?;
            let ftr = extract_features(model, &train.images, FeatureSource::SparseMean, parallel)?;
            let fte = extract_features(model, &test.images, FeatureSource::SparseMean, parallel)?;
            let result = linear_probe(&ftr, &train.labels, Some((&fte, &test.labels)), probe)?;
            log::info!("r={r}: recon {recon_mse:.5}, probe {:.2}%", result.accuracy);
            Ok(RankRow {
                r,
                recon_mse,
                probe_accuracy: result.accuracy,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[RankRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for row in rows {
        let _ = writeln!(out, "{},{:?},{:?}", row.r, row.recon_mse, row.probe_accuracy);
    }
    out
}

#[cfg(test)]
mod tests;
