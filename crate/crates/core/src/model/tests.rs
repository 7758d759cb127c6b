use super::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_size: 8,
            patch_size: 2,
            width: 8,
            depth: 2,
            heads: 2,
            r: 3,
            projector_dim: 4,
            k_sparse: 5,
            k_cls: 6,
            tau_spatial: 0.06,
        },
        decoder: DecoderConfig {
            width: 8,
            depth: 1,
            heads: 2,
        },
    }
}

fn noise_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| rng.gen::<f32>()).collect();
    Image::new(3, size, size, data).unwrap()
}

#[test]
fn zero_image_shape_contract() {
    let mut model = Model::init(&tiny(), 0).unwrap();
    let patch_w = model.params.lookup("patch_embed.w").unwrap();
    model.params.get_mut(patch_w).data_mut().fill(0.0);
    let out = model.encode(&Image::filled(3, 8, 8, 0.0), None).unwrap();
    assert_eq!(out.sparse.values.dim(), (3, 8));
    assert_eq!(out.dense.dim(), (16, 8));
    assert_eq!(out.cls.len(), 8);
    assert!(out.sparse.values.iter().chain(out.dense.iter()).chain(out.cls.iter()).all(|v| v.is_finite()));
    assert!(model.encode(&Image::filled(3, 6, 8, 0.0), None).is_err());
}

#[test]
fn encode_is_deterministic() {
    let model = Model::init(&tiny(), 1).unwrap();
    let img = noise_image(2, 8);
    assert_eq!(model.encode(&img, None).unwrap(), model.encode(&img, None).unwrap());
    let batch = model.encode_batch(&[img.clone(), noise_image(3, 8)], None).unwrap();
    let single = model.encode(&img, None).unwrap();
    for (a, b) in batch[0].sparse.values.iter().zip(single.sparse.values.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn visible_patch_order_does_not_matter() {
    let model = Model::init(&tiny(), 4).unwrap();
    let img = noise_image(5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut vis: Vec<usize> = (0..16).step_by(2).collect();
    let a = model.encode(&img, Some(&vis)).unwrap();
    vis.shuffle(&mut rng);
    let b = model.encode(&img, Some(&vis)).unwrap();
    for (x, y) in a.sparse.values.iter().zip(b.sparse.values.iter()) {
        assert!((x - y).abs() < 1e-5);
    }
    for (x, y) in a.cls.iter().zip(b.cls.iter()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn masked_pixels_have_no_influence() {
    let model = Model::init(&tiny(), 7).unwrap();
    let img = noise_image(8, 8);
    let vis = [0usize, 3, 5, 9, 15];
    let mut zeroed = img.clone();
    // Patch 1 covers rows 0..2, columns 2..4.
    for c in 0..3 {
        for y in 0..2 {
            for x in 2..4 {
                zeroed.set(c, y, x, 0.0);
            }
        }
    }
    assert_eq!(model.encode(&img, Some(&vis)).unwrap(), model.encode(&zeroed, Some(&vis)).unwrap());
    assert!(model.encode(&img, Some(&[])).is_err());
    assert!(model.encode(&img, Some(&[16])).is_err());
    assert!(model.encode(&img, Some(&[2, 2])).is_err());
}

fn head(d: usize, tau: f64) -> LocalizationHead {
    LocalizationHead {
        w1: Array2::eye(d),
        w2: Array2::eye(d),
        tau_spatial: tau,
    }
}

#[test]
fn single_token_localizes_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dense = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
    let sparse = SemanticMatrix::new(Array2::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0))).unwrap();
    let l = localize(&head(4, 0.06), dense.view(), &sparse).unwrap();
    assert!(l.values.iter().all(|v| *v == 1.0));
}

#[test]
fn parallel_token_dominates() {
    let mut sparse = Array2::zeros((4, 4));
    for j in 0..4 {
        sparse[[j, j]] = 1.0;
    }
    let dense = ndarray::array![[0.0, 0.0, 3.0, 0.0]];
    let l = localize(&head(4, 0.06), dense.view(), &SemanticMatrix::new(sparse).unwrap()).unwrap();
    let row = l.values.row(0);
    assert!(row[2] > 0.99);
    let e = (1.0f64 / 0.06).exp();
    assert!((row[2] - e / (e + 3.0)).abs() < 1e-12);
}

/// Cosine similarity and softmax written out with scalar loops.
fn localize_oracle(h: &LocalizationHead, dense: &Array2<f64>, sparse: &Array2<f64>) -> Array2<f64> {
    let u = dense.dot(&h.w1);
    let s = sparse.dot(&h.w2);
    let (n, r) = (u.nrows(), s.nrows());
    let mut out = Array2::zeros((n, r));
    for i in 0..n {
        let mut e = vec![0.0; r];
        for j in 0..r {
            let mut dot = 0.0;
            let mut nu = 0.0;
            let mut ns = 0.0;
            for k in 0..u.ncols() {
                dot += u[[i, k]] * s[[j, k]];
                nu += u[[i, k]] * u[[i, k]];
                ns += s[[j, k]] * s[[j, k]];
            }
            e[j] = (dot / (nu.sqrt().max(1e-8) * ns.sqrt().max(1e-8)) / h.tau_spatial).exp();
        }
        let z: f64 = e.iter().sum();
        for j in 0..r {
            out[[i, j]] = e[j] / z;
        }
    }
    out
}

#[test]
fn localize_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
    let h = LocalizationHead {
        w1: rand(5, 5),
        w2: rand(5, 5),
        tau_spatial: 0.06,
    };
    let dense = rand(6, 5);
    let sparse = rand(3, 5);
    let l = localize(&h, dense.view(), &SemanticMatrix::new(sparse.clone()).unwrap()).unwrap();
    let o = localize_oracle(&h, &dense, &sparse);
    for (a, b) in l.values.iter().zip(o.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn graph_localize_matches_pure() {
    let model = Model::init(&tiny(), 3).unwrap().cast::<f64>();
    let img = noise_image(9, 8);
    let out = model.encode(&img, None).unwrap();
    let pure = localize(&model.localization_head(), out.dense.view(), &out.sparse).unwrap();
    let g = Graph::new();
    let net = model.net(&g);
    let dense = g.constant(Tensor::new(vec![1, 16, 8], out.dense.iter().copied().collect()));
    let sparse = g.constant(Tensor::new(vec![1, 3, 8], out.sparse.values.iter().copied().collect()));
    let l = g.value(net.localize(dense, sparse));
    for (a, b) in l.data().iter().zip(pure.values.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (s, loc) = model.factorize(&img).unwrap();
    assert_eq!(s, out.sparse);
    assert_eq!(loc, pure);
}

#[test]
fn decode_shapes_and_constant_head() {
    let mut model = Model::init(&tiny(), 5).unwrap();
    let z = Array2::from_elem((16, 8), 0.3);
    let img = model.decode(z.view()).unwrap();
    assert_eq!((img.channels(), img.height(), img.width()), (3, 8, 8));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(model.decode(Array2::zeros((15, 8)).view()).is_err());

    let w = model.params.lookup("dec.out.w").unwrap();
    let b = model.params.lookup("dec.out.b").unwrap();
    model.params.get_mut(w).data_mut().fill(0.0);
    model.params.get_mut(b).data_mut().fill(0.25);
    let img = model.decode(Array2::zeros((16, 8)).view()).unwrap();
    assert!(img.data().iter().all(|v| *v == 0.25));
    assert_eq!(model.reconstruct(&noise_image(1, 8)).unwrap(), img);
}

#[test]
fn ema_examples() {
    let mut student = ParamStore::new();
    student.insert("a", Tensor::scalar(0.0f64));
    student.insert("dec", Tensor::scalar(5.0f64));
    let mut tparams = ParamStore::new();
    tparams.insert("a", Tensor::scalar(1.0f64));
    let teacher = TeacherState {
        params: tparams,
        momentum: 0.996,
    };
    let next = ema_update(&teacher, &student, 0.996).unwrap();
    assert_eq!(next.params.get(ParamId(0)).item(), 0.996);
    assert_eq!(ema_update(&teacher, &student, 0.0).unwrap().params.get(ParamId(0)).item(), 0.0);
    assert_eq!(ema_update(&teacher, &student, 1.0).unwrap().params, teacher.params);

    let mut wrong = ParamStore::new();
    wrong.insert("a", Tensor::zeros(&[2]));
    assert!(ema_update(&teacher, &wrong, 0.5).is_err());
    assert!(ema_update(&teacher, &student, 1.5).is_err());
}

use crate::tensor::ParamId;

#[test]
fn ema_on_model_and_fixed_point() {
    let model = Model::init(&tiny(), 0).unwrap();
    let other = Model::init(&tiny(), 1).unwrap();
    let mut teacher = model.student_params();
    ema_update_in_place(&mut teacher, &model.params, 1.0).unwrap();
    assert_eq!(teacher, model.student_params());
    ema_update_in_place(&mut teacher, &other.params, 0.0).unwrap();
    assert_eq!(teacher, other.student_params());
    let swapped = model.with_student(&teacher).unwrap();
    assert_eq!(swapped.student_params(), other.student_params());
}

#[test]
fn records_round_trip() {
    let model = Model::init(&tiny(), 0).unwrap();
    let recs = model.records();
    assert!(recs.iter().any(|(n, _)| n == "student.queries"));
    assert!(recs.iter().any(|(n, _)| n == "decoder.dec.out.w"));
    let mut other = Model::init(&tiny(), 9).unwrap();
    assert_ne!(other, model);
    other.load_records(&recs).unwrap();
    assert_eq!(other, model);
    assert!(other.load_records(&recs[1..]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn localize_rows_in_simplex(seed in 0u64..100_000, scale in 0.01f64..100.0, tau in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |r, c| Array2::from_shape_fn((r, c), |_| rng.gen_range(-scale..scale));
        let h = LocalizationHead { w1: rand(4, 4), w2: rand(4, 4), tau_spatial: tau };
        let l = localize(&h, rand(7, 4).view(), &SemanticMatrix::new(rand(5, 4)).unwrap()).unwrap();
        for row in l.values.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ema_twice_with_fixed_student(seed in 0u64..1000, m in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = ParamStore::new();
        t.insert("w", Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0f64..1.0)).collect()));
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3]));
        let mut twice = t.clone();
        ema_update_in_place(&mut twice, &s, m).unwrap();
        ema_update_in_place(&mut twice, &s, m).unwrap();
        let mut once = t.clone();
        ema_update_in_place(&mut once, &s, m * m).unwrap();
        for (a, b) in twice.get(ParamId(0)).data().iter().zip(once.get(ParamId(0)).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let mut fixed = t.clone();
        ema_update_in_place(&mut fixed, &t, m).unwrap();
        for (a, b) in fixed.get(ParamId(0)).data().iter().zip(t.get(ParamId(0)).data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
