use super::*;
use crate::model::{DecoderConfig, EncoderConfig, ModelConfig};
use crate::pipeline::{load_dataset, DatasetSource, Split, TrainState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            patch_size: 2,
            width: 16,
            depth: 1,
            heads: 2,
            r: 4,
            projector_dim: 8,
            k_sparse: 12,
            k_cls: 6,
            tau_spatial: 0.06,
        },
        decoder: DecoderConfig {
            width: 16,
            depth: 1,
            heads: 2,
        },
    }
}

fn images(n: u64) -> Dataset {
    load_dataset(&DatasetSource::synthetic(1, n as usize, Split::Train), 8).unwrap()
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        lrs: vec![1e-2, 5e-2],
        batches: vec![32],
        epochs: 30,
        ..ProbeConfig::default()
    }
}

#[test]
fn feature_shapes_and_determinism() {
    let model = Model::init(&small_model(), 0).unwrap();
    let data = images(70);
    for source in [FeatureSource::SparseMean, FeatureSource::Cls, FeatureSource::DenseMean] {
        let a = extract_features(&model, &data.images, source, true).unwrap();
        assert_eq!(a.dim(), (70, 16));
        assert_eq!(a, extract_features(&model, &data.images, source, false).unwrap());
        assert_eq!(source, source.as_str().parse().unwrap());
    }
    assert!("mean".parse::<FeatureSource>().is_err());
}

#[test]
fn constant_encoder_gives_identical_features() {
    let mut model = Model::init(&small_model(), 0).unwrap();
    let id = model.params.lookup("patch_embed.w").unwrap();
    model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let f = extract_features(&model, &images(5).images, FeatureSource::SparseMean, false).unwrap();
    for row in f.rows() {
        assert_eq!(row, f.row(0));
    }
}

#[test]
fn checkpoint_features_match_and_corruption_is_reported() {
    let dir = tempdir().unwrap();
    let config = crate::pipeline::TrainConfig {
        model: small_model(),
        ..crate::pipeline::TrainConfig::toy()
    };
    let state = TrainState::init(&config).unwrap();
    let path = dir.path().join("c.stlr");
    state.save(&config, &path).unwrap();
    let (cfg, model) = load_model(&path).unwrap();
    assert_eq!(cfg, config);
    assert_eq!(model, state.model);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_model(&path), Err(StellarError::Checkpoint { .. })));
}

fn separable(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let x = Array2::from_shape_fn((n, 4), |(i, j)| {
        let sign = if labels[i] == 0 { -1.0 } else { 1.0 };
        if j == 0 {
            sign * (1.0 + rng.gen::<f64>())
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    (x, labels)
}

#[test]
fn separable_two_class_probe_is_perfect() {
    let (x, y) = separable(200, 0);
    let (tx, ty) = separable(100, 1);
    for normalization in [Normalization::LayerStyle, Normalization::None] {
        let cfg = ProbeConfig {
            normalization,
            ..quick_probe()
        };
        let r = linear_probe(&x, &y, Some((&tx, &ty)), &cfg).unwrap();
        assert_eq!(r.accuracy, 100.0, "{normalization:?}");
        assert_eq!(r.table.len(), 2);
    }
}

#[test]
fn shuffled_labels_give_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 3000;
    let x = Array2::from_shape_fn((n, 16), |_| rng.gen_range(-1.0..1.0));
    let y: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let tx = Array2::from_shape_fn((2000, 16), |_| rng.gen_range(-1.0..1.0));
    let ty: Vec<usize> = (0..2000).map(|i| i % 10).collect();
    let cfg = ProbeConfig {
        lrs: vec![1e-3],
        batches: vec![128],
        epochs: 10,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&x, &y, Some((&tx, &ty)), &cfg).unwrap();
    assert!((r.accuracy - 10.0).abs() <= 3.0, "{}", r.accuracy);
    let knn = knn_probe(&x, &y, &tx, &ty, 20).unwrap();
    assert!((knn - 10.0).abs() <= 3.0, "{knn}");
}

#[test]
fn selection_ignores_test_split() {
    let (x, y) = separable(120, 4);
    let (tx, ty) = separable(50, 5);
    let cfg = ProbeConfig {
        lrs: vec![1e-4, 1e-2],
        batches: vec![16, 64],
        epochs: 5,
        ..ProbeConfig::default()
    };
    let with = linear_probe(&x, &y, Some((&tx, &ty)), &cfg).unwrap();
    let without = linear_probe(&x, &y, None, &cfg).unwrap();
    assert_eq!((with.best_lr, with.best_batch), (without.best_lr, without.best_batch));
    let vals = |r: &ProbeResult| r.table.iter().map(|row| row.val_accuracy).collect::<Vec<_>>();
    assert_eq!(vals(&with), vals(&without));
}

#[test]
fn probe_errors() {
    let x = Array2::zeros((10, 3));
    assert!(matches!(linear_probe(&x, &[1; 10], None, &quick_probe()), Err(StellarError::Probe(_))));
    let bad = ProbeConfig {
        val_fraction: 1.0,
        ..quick_probe()
    };
    assert!(linear_probe(&x, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], None, &bad).is_err());
    let mut nan = Array2::zeros((10, 3));
    nan[[0, 0]] = f64::NAN;
    assert!(linear_probe(&nan, &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1], None, &quick_probe()).is_err());
    assert!(knn_probe(&x, &[0; 10], &x, &[0; 10], 10).is_err());
    assert!(knn_probe(&x, &[0; 10], &x, &[0; 10], 0).is_err());
}

#[test]
fn knn_examples() {
    let (x, y) = separable(50, 6);
    assert_eq!(knn_probe(&x, &y, &x, &y, 1).unwrap(), 100.0);
    // One orthogonal direction per class, three copies each.
    let classes = 4;
    let x = Array2::from_shape_fn((classes * 3, classes), |(i, j)| if i % classes == j { 1.0 } else { 0.0 });
    let y: Vec<usize> = (0..classes * 3).map(|i| i % classes).collect();
    for k in 1..=3 {
        assert_eq!(knn_probe(&x, &y, &x, &y, k).unwrap(), 100.0);
    }
}

#[test]
fn reconstruction_error_is_deterministic() {
    let model = Model::init(&small_model(), 2).unwrap();
    let data = images(6);
    let a = reconstruction_mse(&model, &data.images, true).unwrap();
    assert!(a > 0.0 && a < 1.0);
    assert_eq!(a, reconstruction_mse(&model, &data.images, false).unwrap());
}

#[test]
fn single_rank_sweep_equals_plain_run() {
    let dir = tempdir().unwrap();
    let base = crate::pipeline::TrainConfig {
        model: small_model(),
        epochs: 1,
        warmup_epochs: 0,
        batch_size: 8,
        n_masked_views: 1,
        n_local_crops: 1,
        dataset: DatasetSource::synthetic(1, 16, Split::Train),
        deterministic: true,
        ..crate::pipeline::TrainConfig::toy()
    };
    let train = images(16);
    let test = load_dataset(&DatasetSource::synthetic(1, 8, Split::Test), 8).unwrap();
    let rows = rank_sweep(&base, &[4], dir.path(), &train, &test, &quick_probe()).unwrap();
    assert_eq!(rows.len(), 1);
    let plain = run_training(&base, &dir.path().join("plain"), None).unwrap();
    assert_eq!(rows[0].recon_mse, reconstruction_mse(&plain.state.model, &test.images, false).unwrap());
    let again = rank_sweep(&base, &[4], &dir.path().join("again"), &train, &test, &quick_probe()).unwrap();
    assert_eq!(rows, again);
    assert!(sweep_csv(&rows).starts_with(SWEEP_CSV_HEADER));
    assert!(rank_sweep(&base, &[], dir.path(), &train, &test, &quick_probe()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn sparse_mean_ignores_token_order(seed in 0u64..1000) {
        let model = Model::init(&small_model(), seed).unwrap();
        let img = &images(1).images[0];
        let out = model.encode(img, None).unwrap();
        let mut perm: Vec<usize> = (0..4).collect();
        perm.reverse();
        let permuted = out.sparse.values.select(Axis(0), &perm);
        // The mean is taken column-wise with sorted-independent ordering only
        // up to rounding; compare exact sums of the same multiset.
        let a = out.sparse.values.mean_axis(Axis(0)).unwrap();
        let b = permuted.mean_axis(Axis(0)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
