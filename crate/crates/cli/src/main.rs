use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use stellar_core::eval::selftest::{checks_csv, run_selftest};
use stellar_core::eval::{
    extract_features, knn_probe, linear_probe, load_model, rank_sweep, sweep_csv, FeatureSource, Normalization, ProbeConfig,
    KNN_CSV_HEADER,
};
use stellar_core::factorization::{crop_csv, crop_robustness_probe, shift_csv, shift_probe, ImageEncoder, ShiftAxis};
use stellar_core::model::Model;
use stellar_core::pipeline::{load_dataset, load_image, run_training, Dataset, DatasetKind, DatasetSource, Split, TrainConfig};
use stellar_core::raster::Image;
use stellar_core::transport::{bench_matching, BenchConfig, OtConfig};

#[derive(Parser)]
#[command(name = "stellar", version, about = "Train and probe factorized sparse visual representations")]
struct Cli {
    /// Overrides the seed of the config or of the evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (or directory for `train` and `sweep-rank`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen features.
    Probe {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum, default_value_t = NormArg::LayerStyle)]
        normalization: NormArg,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
    },
    /// Cosine kNN classifier on frozen features.
    Knn {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    #[command(subcommand)]
    Analyze(Analyze),
    /// Train one model per rank and report reconstruction error and probe accuracy.
    SweepRank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<usize>,
        /// Held-out split; defaults to the test split of the config's dataset.
        #[arg(long)]
        test: Option<String>,
    },
    #[command(subcommand)]
    Bench(Bench),
    /// Run the invariant and gradient-check suite.
    Selftest,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Training images, e.g. `synthetic:0:1000`, `cifar10:DIR` or `folder:DIR`.
    #[arg(long)]
    data: String,
    /// Evaluation images; defaults to the test split of `--data`.
    #[arg(long)]
    test: Option<String>,
    #[arg(long, default_value = "sparse-mean")]
    source: FeatureSource,
}

#[derive(Subcommand)]
enum Analyze {
    /// How much of a translation lands in S versus L.
    Shift {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        shifts: Vec<usize>,
        #[arg(long, default_value = "x")]
        axis: ShiftAxis,
    },
    /// Pooled-feature distance between full images and random crops.
    Crop {
        /// Repeat to compare several checkpoints.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: String,
        #[arg(long, value_delimiter = ',', num_args = 1, default_value = "0.5,1.0")]
        scale: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        crops: usize,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Batched entropic matching against per-instance Hungarian.
    Match {
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64")]
        batch_sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        r: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        /// Spread each batch over worker threads.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    LayerStyle,
    None,
}

/// Bad flag combinations found after parsing; reported like clap errors.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

struct Named {
    name: String,
    model: Model<f32>,
}

impl ImageEncoder for Named {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_size(&self) -> usize {
        self.model.input_size()
    }

    fn factors(&self, image: &Image) -> stellar_core::Result<(Array2<f64>, Array2<f64>)> {
        self.model.factors(image)
    }
}

fn out_path(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| usage("--out is required for this command"))
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_source(spec: &str) -> Result<DatasetSource> {
    DatasetSource::parse(spec).map_err(|e| usage(e.to_string()))
}

/// `--test` when given, else the test split of the training source.
fn test_source(train: &DatasetSource, test: Option<&str>) -> Result<DatasetSource> {
    match test {
        Some(spec) => parse_source(spec),
        None if train.kind == DatasetKind::ImageFolder => Err(usage("image folders have no test split; pass --test")),
        None => Ok(DatasetSource {
            split: Split::Test,
            ..train.clone()
        }),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = TrainConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn features(model: &Model<f32>, data: &Dataset, source: FeatureSource) -> Result<Array2<f64>> {
    let parallel = std::env::var("STELLAR_DETERMINISTIC").map_or(true, |v| v != "1");
    Ok(extract_features(model, &data.images, source, parallel)?)
}

fn eval_data(eval: &EvalArgs) -> Result<(Model<f32>, Dataset, Dataset)> {
    let train_src = parse_source(&eval.data)?;
    let test_src = test_source(&train_src, eval.test.as_deref())?;
    let (_, model) = load_model(&eval.ckpt)?;
    let size = model.input_size();
    let train = load_dataset(&train_src, size)?;
    let test = load_dataset(&test_src, size)?;
    Ok((model, train, test))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train { config, resume } => {
            let config = load_config(&config, seed)?;
            let report = run_training(&config, out_path(&cli.out)?, resume.as_deref())?;
            println!("final checkpoint: {}", report.final_checkpoint.display());
        }
        Command::Probe { eval, normalization, epochs } => {
            let out = out_path(&cli.out)?;
            let (model, train, test) = eval_data(&eval)?;
            let config = ProbeConfig {
                feature_source: eval.source,
                normalization: match normalization {
                    NormArg::LayerStyle => Normalization::LayerStyle,
                    NormArg::None => Normalization::None,
                },
                epochs,
                seed: seed.unwrap_or(0),
                ..ProbeConfig::default()
            };
            let ftr = features(&model, &train, eval.source)?;
            let fte = features(&model, &test, eval.source)?;
            let result = linear_probe(&ftr, &train.labels, Some((&fte, &test.labels)), &config)?;
            write_out(out, &result.to_csv(eval.source))?;
            println!(
                "linear probe ({}): {:.2}% at lr {} batch {}",
                eval.source.as_str(),
                result.accuracy,
                result.best_lr,
                result.best_batch
            );
        }
        Command::Knn { eval, k } => {
            let out = out_path(&cli.out)?;
            let (model, train, test) = eval_data(&eval)?;
            let ftr = features(&model, &train, eval.source)?;
            let fte = features(&model, &test, eval.source)?;
            let acc = knn_probe(&ftr, &train.labels, &fte, &test.labels, k)?;
            write_out(out, &format!("{KNN_CSV_HEADER}\n{},{k},{acc:?}\n", eval.source.as_str()))?;
            println!("kNN ({}, k={k}): {acc:.2}%", eval.source.as_str());
        }
        Command::Analyze(Analyze::Shift { ckpt, image, shifts, axis }) => {
            let out = out_path(&cli.out)?;
            let (_, model) = load_model(&ckpt)?;
            let img = load_image(&image)?;
            let results = shift_probe(&model, &img, &shifts, axis, &OtConfig::default())?;
            let mut csv = Vec::new();
            shift_csv(&results, &mut csv)?;
            write_out(out, &String::from_utf8(csv)?)?;
        }
        Command::Analyze(Analyze::Crop { ckpt, data, scale, crops }) => {
            let out = out_path(&cli.out)?;
            let &[lo, hi] = scale.as_slice() else {
                return Err(usage("--scale takes two values, e.g. 0.5,1.0"));
            };
            let encoders = ckpt
                .iter()
                .map(|p| {
                    let (_, model) = load_model(p)?;
                    let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    Ok(Named { name, model })
                })
                .collect::<Result<Vec<_>>>()?;
            let size = encoders[0].input_size();
            if encoders.iter().any(|e| e.input_size() != size) {
                return Err(usage("all checkpoints must share an image size"));
            }
            let dataset = load_dataset(&parse_source(&data)?, size)?;
            let refs: Vec<&dyn ImageEncoder> = encoders.iter().map(|e| e as &dyn ImageEncoder).collect();
            let results = crop_robustness_probe(&refs, &dataset.images, (lo, hi), crops, seed.unwrap_or(0))?;
            let mut csv = Vec::new();
            crop_csv(&results, &mut csv)?;
            write_out(out, &String::from_utf8(csv)?)?;
        }
        Command::SweepRank { config, r, test } => {
            let out = out_path(&cli.out)?;
            let config = load_config(&config, seed)?;
            let test_src = test_source(&config.dataset, test.as_deref())?;
            let size = config.model.encoder.image_size;
            let train = load_dataset(&config.dataset, size)?;
            let test = load_dataset(&test_src, size)?;
            let probe = ProbeConfig {
                seed: config.seed,
                ..ProbeConfig::default()
            };
            let rows = rank_sweep(&config, &r, out, &train, &test, &probe)?;
            write_out(&out.join("rank_sweep.csv"), &sweep_csv(&rows))?;
        }
        Command::Bench(Bench::Match { batch_sizes, r, repeats, parallel }) => {
            let out = out_path(&cli.out)?;
            let report = bench_matching(&BenchConfig {
                batch_sizes,
                r,
                repeats,
                parallel,
                seed: seed.unwrap_or(0),
                ..BenchConfig::default()
            });
            write_out(out, &report.to_csv())?;
            println!("matchings agree on {:.1}% of instances", 100.0 * report.agreement);
        }
        Command::Selftest => {
            let checks = run_selftest(seed.unwrap_or(0))?;
            for c in &checks {
                println!("{} {} (value {:.3e}, threshold {:.1e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            if let Some(out) = &cli.out {
                write_out(out, &checks_csv(&checks))?;
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
