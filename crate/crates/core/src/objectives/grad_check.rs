use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference check of an analytic gradient on 64 random
/// coordinates (or all of them when there are fewer).
///
/// `f` returns the loss and its full gradient at the given point. The result
/// is the largest `|a − n| / max(|a|, |n|, 1e-8)` over checked coordinates.
pub fn grad_check(f: impl FnMut(&[f64]) -> (f64, Vec<f64>), params: &[f64], epsilon: f64) -> f64 {
    grad_check_with(f, params, epsilon, 64, 0)
}

pub fn grad_check_with(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    params: &[f64],
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> f64 {
    assert!(epsilon > 0.0, "grad_check epsilon must be positive");
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length");
    let coords: Vec<usize> = if params.len() <= samples {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, params.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x).0;
        x[i] = orig - epsilon;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}
