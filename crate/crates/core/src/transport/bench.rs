use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{entropic_ot_batch, extract_matching, hungarian, CostMatrix, Matching, OtConfig};
use crate::error::Result;

pub const BENCH_CSV_HEADER: &str = "method,batch_size,r,repeats,mean_seconds,std_seconds,parallel";

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub r: usize,
    pub repeats: usize,
    pub parallel: bool,
    pub seed: u64,
    /// Width of the synthetic token sets the costs are built from.
    pub token_dim: usize,
    /// Amplitude of the uniform noise separating the two token sets.
    pub noise: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_sizes: vec![4, 8, 16, 32, 64],
            r: 16,
            repeats: 20,
            parallel: false,
            seed: 0,
            token_dim: 32,
            noise: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub batch_size: usize,
    pub r: usize,
    pub repeats: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub parallel: bool,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fraction of instances on which both methods returned the same matching.
    pub agreement: f64,
}

impl BenchReport {
    pub fn row(&self, method: &str, batch_size: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method && r.batch_size == batch_size)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(BENCH_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.9e},{:.9e},{}",
                r.method, r.batch_size, r.r, r.repeats, r.mean_seconds, r.std_seconds, r.parallel
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Cost batch from token sets compared against noisy, shuffled copies.
pub fn random_cost_batch(rng: &mut ChaCha8Rng, batch: usize, r: usize, dim: usize, noise: f64) -> Vec<CostMatrix> {
    (0..batch)
        .map(|_| {
            let tokens = Array2::from_shape_fn((r, dim), |_| rng.gen_range(-1.0..1.0));
            let mut perm: Vec<usize> = (0..r).collect();
            perm.shuffle(rng);
            let view = Array2::from_shape_fn((r, dim), |(i, k)| tokens[[perm[i], k]] + rng.gen_range(-noise..=noise));
            CostMatrix::from_tokens(view.view(), tokens.view()).expect("finite tokens")
        })
        .collect()
}

fn run_sinkhorn(costs: &[CostMatrix], cfg: &OtConfig, parallel: bool) -> Vec<Matching> {
    entropic_ot_batch(costs, cfg, parallel)
        .expect("valid costs")
        .iter()
        .map(extract_matching)
        .collect()
}

fn run_hungarian(costs: &[CostMatrix], parallel: bool) -> Vec<Matching> {
    let solve = |c: &CostMatrix| hungarian(c.view()).expect("valid costs");
    if parallel {
        costs.par_iter().map(solve).collect()
    } else {
        costs.iter().map(solve).collect()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Times batched entropic matching against per-instance Hungarian on
/// identical cost batches.
pub fn bench_matching(config: &BenchConfig) -> BenchReport {
    let ot = OtConfig::default();
    let repeats = config.repeats.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::new();
    let mut agree = 0usize;
    let mut total = 0usize;
    for &batch in &config.batch_sizes {
        let costs = random_cost_batch(&mut rng, batch.max(1), config.r, config.token_dim, config.noise);

        let sk = run_sinkhorn(&costs, &ot, config.parallel);
        let hu = run_hungarian(&costs, config.parallel);
        agree += sk.iter().zip(&hu).filter(|(a, b)| a == b).count();
        total += costs.len();

        let mut sk_times = Vec::with_capacity(repeats);
        let mut hu_times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(run_sinkhorn(std::hint::black_box(&costs), &ot, config.parallel));
            sk_times.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(run_hungarian(std::hint::black_box(&costs), config.parallel));
            hu_times.push(t.elapsed().as_secs_f64());
        }
        for (method, times) in [("sinkhorn", &sk_times), ("hungarian", &hu_times)] {
            let (mean_seconds, std_seconds) = mean_std(times);
            rows.push(BenchRow {
                method,
                batch_size: batch,
                r: config.r,
                repeats,
                mean_seconds,
                std_seconds,
                parallel: config.parallel,
            });
        }
    }
    BenchReport {
        rows,
        agreement: agree as f64 / total.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_cross_check() {
        let report = bench_matching(&BenchConfig {
            batch_sizes: vec![1],
            r: 2,
            repeats: 2,
            ..BenchConfig::default()
        });
        assert_eq!(report.agreement, 1.0);
        assert_eq!(report.rows.len(), 2);
    }

    #[test]
    fn csv_layout() {
        let report = bench_matching(&BenchConfig {
            batch_sizes: vec![2, 3],
            r: 4,
            repeats: 1,
            ..BenchConfig::default()
        });
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("sinkhorn,2,4,1,"));
        assert!(lines[2].starts_with("hungarian,2,4,1,"));
        assert!(lines[4].ends_with(",false"));
    }
}
