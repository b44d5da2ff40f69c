//! `ffcp` command line: dataset generation, method runs, and benchmarks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ffcp::bench::ReportFormat;
use ffcp::cli::{
    execute_bench_to_files, execute_gen_data, execute_run_to_file, print_config, BenchConfig,
    DatasetSpec, MethodSpec, RunConfig, SplitSpec,
};
use ffcp::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ffcp",
    about = "Conformal prediction toolkit: vanilla CP, FFCP and variants, an FCP baseline, and a benchmark harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Train a model and run one conformal method end to end.
    Run(RunArgs),
    /// Run a methods × seeds cross product and aggregate the results.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// synthetic | synthetic-hetero | synthetic-classes
    #[arg(long, default_value = "synthetic")]
    kind: String,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    dx: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path (required).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct CommonRunArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<MethodSpec2>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Layer split index, or "sweep" to try all of them.
    #[arg(long)]
    split_index: Option<String>,
    /// synthetic | synthetic-hetero | synthetic-classes | csv
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dx: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// CSV dataset path (with --dataset csv).
    #[arg(long)]
    csv_path: Option<PathBuf>,
    /// Target column names for CSV datasets (comma separated).
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    fcp_samples: Option<usize>,
    /// RAPS/FFRAPS gradient-term weight.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k_reg: Option<usize>,
    /// Localizer bandwidth (default: median heuristic).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Load the trained model from this file instead of training.
    #[arg(long)]
    load_model: Option<PathBuf>,
    /// Save the trained model to this file.
    #[arg(long)]
    save_model: Option<PathBuf>,
    /// Measure localizer distances on raw inputs instead of features.
    #[arg(long)]
    localizer_input_space: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// json | csv | markdown
    #[arg(long)]
    format: Option<String>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

// clap needs FromStr with a std error type; wrap the crate parser.
#[derive(Clone, Copy)]
struct MethodSpec2(MethodSpec);

impl std::str::FromStr for MethodSpec2 {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.parse::<MethodSpec>()
            .map(MethodSpec2)
            .map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Comma-separated method list.
    #[arg(long, default_value = "vanilla,fcp,ffcp")]
    methods: String,
    /// Number of seeds (0..seeds).
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Parallel (method, seed) jobs; timed phases stay single-threaded.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn build_run_config(common: &CommonRunArgs) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(m) = common.method {
        config.method = m.0;
    }
    if let Some(a) = common.alpha {
        config.alpha = a;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(spec) = &common.split_index {
        config.split_index = spec.parse::<SplitSpec>()?;
    }
    if let Some(kind) = &common.dataset {
        config.dataset = dataset_from_flags(kind, common, &config)?;
    } else if common.n.is_some() || common.dx.is_some() || common.noise_scale.is_some() {
        // Adjust the existing spec's size knobs in place.
        let kind = config.dataset.label();
        config.dataset = dataset_from_flags(&kind, common, &config)?;
    }
    let train = &mut config.train;
    if let Some(e) = common.epochs {
        train.epochs = e;
    }
    if let Some(b) = common.batch_size {
        train.batch_size = b;
    }
    if let Some(lr) = common.learning_rate {
        train.learning_rate = lr;
    }
    if let Some(ns) = common.fcp_samples {
        config.fcp_estimator.n_samples = ns;
    }
    if let Some(d) = common.delta {
        config.raps.delta = d;
    }
    if let Some(l) = common.lambda {
        config.raps.lambda = l;
    }
    if let Some(k) = common.k_reg {
        config.raps.k_reg = k;
    }
    if let Some(h) = common.bandwidth {
        config.localizer.bandwidth = Some(h);
    }
    if let Some(p) = &common.load_model {
        config.model_in = Some(p.clone());
    }
    if let Some(p) = &common.save_model {
        config.model_out = Some(p.clone());
    }
    if common.localizer_input_space {
        config.localizer.feature_space = false;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    if let Some(f) = &common.format {
        config.format = f.parse::<ReportFormat>()?;
    }
    Ok(config)
}

fn dataset_from_flags(kind: &str, common: &CommonRunArgs, base: &RunConfig) -> Result<DatasetSpec> {
    let (cur_n, cur_dx, cur_noise, cur_classes) = match &base.dataset {
        DatasetSpec::Synthetic { n, d_x, noise_scale }
        | DatasetSpec::SyntheticHetero { n, d_x, noise_scale } => (*n, *d_x, *noise_scale, 10),
        DatasetSpec::SyntheticClasses { n, d_x, classes } => (*n, *d_x, 1.0, *classes),
        DatasetSpec::Csv { .. } => (10_000, 100, 1.0, 10),
    };
    let n = common.n.unwrap_or(cur_n);
    let d_x = common.dx.unwrap_or(cur_dx);
    let noise_scale = common.noise_scale.unwrap_or(cur_noise);
    let classes = common.classes.unwrap_or(cur_classes);
    Ok(match kind {
        "synthetic" => DatasetSpec::Synthetic { n, d_x, noise_scale },
        "synthetic-hetero" => DatasetSpec::SyntheticHetero { n, d_x, noise_scale },
        "synthetic-classes" => DatasetSpec::SyntheticClasses { n, d_x, classes },
        "csv" => {
            let path = common.csv_path.clone().ok_or_else(|| {
                Error::InvalidConfig("--dataset csv requires --csv-path".into())
            })?;
            let targets = common
                .targets
                .clone()
                .ok_or_else(|| Error::InvalidConfig("--dataset csv requires --targets".into()))?
                .split(',')
                .map(|s| s.trim().to_string())
                .collect();
            DatasetSpec::Csv { path, targets }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown dataset kind {other:?}"
            )))
        }
    })
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => {
            let spec = match args.kind.as_str() {
                "synthetic" => DatasetSpec::Synthetic {
                    n: args.n,
                    d_x: args.dx,
                    noise_scale: args.noise_scale,
                },
                "synthetic-hetero" => DatasetSpec::SyntheticHetero {
                    n: args.n,
                    d_x: args.dx,
                    noise_scale: args.noise_scale,
                },
                "synthetic-classes" => DatasetSpec::SyntheticClasses {
                    n: args.n,
                    d_x: args.dx,
                    classes: args.classes,
                },
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown dataset kind {other:?}"
                    )))
                }
            };
            execute_gen_data(&spec, args.seed, &args.out)
        }
        Command::Run(args) => {
            let config = build_run_config(&args.common)?;
            if args.common.print_config {
                print!("{}", print_config(&config)?);
                return Ok(());
            }
            execute_run_to_file(&config).map(|_| ())
        }
        Command::Bench(args) => {
            let mut methods = Vec::new();
            for tok in args.methods.split(',') {
                methods.push(tok.trim().parse::<MethodSpec>()?);
            }
            let base = build_run_config(&args.common)?;
            let config = BenchConfig {
                methods,
                seeds: args.seeds,
                jobs: args.jobs,
                base,
            };
            if args.common.print_config {
                let mut s = serde_json::to_string_pretty(&config)
                    .map_err(ffcp::Error::from)?;
                s.push('\n');
                print!("{s}");
                return Ok(());
            }
            execute_bench_to_files(&config).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
