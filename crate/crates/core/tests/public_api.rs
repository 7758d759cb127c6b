use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stellar_core::eval::selftest::planted_costs;
use stellar_core::eval::{extract_features, knn_probe, load_model, FeatureSource};
use stellar_core::model::{DecoderConfig, EncoderConfig, ModelConfig};
use stellar_core::pipeline::{load_dataset, run_training, DatasetSource, Split, TrainConfig};
use stellar_core::transport::{entropic_ot_plan, extract_matching, hungarian, sinkhorn_knopp, OtConfig};
use stellar_core::StellarError;

fn small() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
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
                tau_spatial: 0.1,
            },
            decoder: DecoderConfig {
                width: 16,
                depth: 1,
                heads: 2,
            },
        },
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        lr_ramp_epochs: 1,
        n_masked_views: 1,
        n_local_crops: 1,
        dataset: DatasetSource::synthetic(5, 32, Split::Train),
        deterministic: true,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_checkpoint_reloads_to_the_same_features() {
    let dir = tempfile::tempdir().unwrap();
    let config = small();
    let report = run_training(&config, dir.path(), None).unwrap();
    assert_eq!(report.losses.len(), 8);
    assert!(report.losses.iter().all(|l| l.total.is_finite()));

    let (loaded_config, model) = load_model(&report.final_checkpoint).unwrap();
    assert_eq!(loaded_config, config);
    let data = load_dataset(&config.dataset, 8).unwrap();
    let from_disk = extract_features(&model, &data.images, FeatureSource::SparseMean, false).unwrap();
    let in_memory = extract_features(&report.state.model, &data.images, FeatureSource::SparseMean, true).unwrap();
    assert_eq!(from_disk, in_memory);
    assert_eq!(from_disk.dim(), (32, 16));

    let acc = knn_probe(&from_disk, &data.labels, &from_disk, &data.labels, 1).unwrap();
    assert_eq!(acc, 100.0);

    let mut bytes = std::fs::read(&report.final_checkpoint).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let bad = dir.path().join("bad.stlr");
    std::fs::write(&bad, bytes).unwrap();
    assert!(matches!(load_model(&bad), Err(StellarError::Checkpoint { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ot_recovers_planted_matchings(seed in any::<u64>(), r in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cost, sigma) = planted_costs(&mut rng, r);
        let plan = OtConfig::default().solve(&cost).unwrap();
        let m = extract_matching(&plan);
        prop_assert_eq!(&m.sigma, &sigma);
        prop_assert_eq!(m, hungarian(cost.view()).unwrap());
        let eps = OtConfig::default().epsilon_for(&cost);
        prop_assert_eq!(entropic_ot_plan(&cost, eps, 200, 1e-6).unwrap(), plan);
    }

    #[test]
    fn sinkhorn_rows_are_distributions(seed in any::<u64>(), n in 1usize..20, k in 1usize..20, iters in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = ndarray::Array2::from_shape_fn((n, k), |_| rand::Rng::gen_range(&mut rng, -5.0..5.0));
        let q = sinkhorn_knopp(logits.view(), 0.05, iters).unwrap().values;
        for row in q.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
