//! Command execution behind the `ffcp` binary: dataset generation, single
//! method runs, and the bench cross product. Configuration is a JSON file
//! (documented in the README) plus flag overrides; flags win.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{
    aggregate, emit_report, BenchReport, ReportFormat,
};
use crate::calib::{Bandwidth, LocalizerSpace};
use crate::data::{
    gen_synthetic, gen_synthetic_classes, gen_synthetic_hetero, load_csv, split, standardize_with,
    write_csv, Dataset, FoldSplit,
};
use crate::error::{Error, Result};
use crate::fcp::BandEstimatorConfig;
use crate::harness::{
    run_classification_method, run_regression_method, run_split_sweep, train_classifier_model,
    train_quantile_model, train_regression_model, LocalizerConfig, RegressionModels,
    RegressionRunOptions, DEFAULT_SPLIT_INDEX,
};
use crate::nnkit::{OptimizerKind, TrainConfig};
use crate::raps::RapsConfig;
use crate::scores::{FcpSearchConfig, Method};

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "FFCP_OUT_DIR";

/// Methods selectable from the command line (regression + classification).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodSpec {
    Vanilla,
    Ffcp,
    Fcp,
    Cqr,
    Ffcqr,
    Lcp,
    Fflcp,
    Raps,
    Ffraps,
}

impl MethodSpec {
    pub fn name(self) -> &'static str {
        match self {
            MethodSpec::Vanilla => "vanilla",
            MethodSpec::Ffcp => "ffcp",
            MethodSpec::Fcp => "fcp",
            MethodSpec::Cqr => "cqr",
            MethodSpec::Ffcqr => "ffcqr",
            MethodSpec::Lcp => "lcp",
            MethodSpec::Fflcp => "fflcp",
            MethodSpec::Raps => "raps",
            MethodSpec::Ffraps => "ffraps",
        }
    }

    fn regression_method(self) -> Option<Method> {
        match self {
            MethodSpec::Vanilla => Some(Method::Vanilla),
            MethodSpec::Ffcp => Some(Method::Ffcp),
            MethodSpec::Fcp => Some(Method::Fcp),
            MethodSpec::Cqr => Some(Method::Cqr),
            MethodSpec::Ffcqr => Some(Method::Ffcqr),
            MethodSpec::Lcp => Some(Method::Lcp),
            MethodSpec::Fflcp => Some(Method::Fflcp),
            MethodSpec::Raps | MethodSpec::Ffraps => None,
        }
    }

    fn needs_quantile_model(self) -> bool {
        matches!(self, MethodSpec::Cqr | MethodSpec::Ffcqr)
    }
}

impl std::str::FromStr for MethodSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vanilla" => MethodSpec::Vanilla,
            "ffcp" => MethodSpec::Ffcp,
            "fcp" => MethodSpec::Fcp,
            "cqr" => MethodSpec::Cqr,
            "ffcqr" => MethodSpec::Ffcqr,
            "lcp" => MethodSpec::Lcp,
            "fflcp" => MethodSpec::Fflcp,
            "raps" => MethodSpec::Raps,
            "ffraps" => MethodSpec::Ffraps,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown method {other:?}"
                )))
            }
        })
    }
}

/// Fixed split index or a sweep over all of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSpec {
    Index(usize),
    Sweep,
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "sweep" {
            return Ok(SplitSpec::Sweep);
        }
        s.parse::<usize>()
            .map(SplitSpec::Index)
            .map_err(|_| Error::InvalidConfig(format!("split index {s:?} (number or \"sweep\")")))
    }
}

/// What data to run on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic {
        n: usize,
        d_x: usize,
        noise_scale: f64,
    },
    SyntheticHetero {
        n: usize,
        d_x: usize,
        noise_scale: f64,
    },
    SyntheticClasses {
        n: usize,
        d_x: usize,
        classes: usize,
    },
    Csv {
        path: PathBuf,
        targets: Vec<String>,
    },
}

impl DatasetSpec {
    pub fn label(&self) -> String {
        match self {
            DatasetSpec::Synthetic { .. } => "synthetic".into(),
            DatasetSpec::SyntheticHetero { .. } => "synthetic-hetero".into(),
            DatasetSpec::SyntheticClasses { .. } => "synthetic-classes".into(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "csv".into()),
        }
    }

    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic { n, d_x, noise_scale } => {
                gen_synthetic(*n, *d_x, seed, *noise_scale)
            }
            DatasetSpec::SyntheticHetero { n, d_x, noise_scale } => {
                gen_synthetic_hetero(*n, *d_x, seed, *noise_scale)
            }
            DatasetSpec::SyntheticClasses { n, d_x, classes } => {
                gen_synthetic_classes(*n, *d_x, *classes, seed)
            }
            DatasetSpec::Csv { path, targets } => load_csv(path, targets),
        }
    }

    fn is_classification(&self) -> bool {
        matches!(self, DatasetSpec::SyntheticClasses { .. })
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n: 10_000,
            d_x: 100,
            noise_scale: 1.0,
        }
    }
}

/// Training knobs exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pinball levels for the quantile-pair model; None means (α/2, 1-α/2).
    pub pinball_levels: Option<(f64, f64)>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            pinball_levels: None,
        }
    }
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: OptimizerKind::adam_default(),
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizerSettings {
    /// "input" or "feature".
    pub feature_space: bool,
    /// None = median-heuristic bandwidth.
    pub bandwidth: Option<f64>,
}

impl Default for LocalizerSettings {
    fn default() -> Self {
        Self {
            feature_space: true,
            bandwidth: None,
        }
    }
}

impl LocalizerSettings {
    fn to_config(self) -> LocalizerConfig {
        LocalizerConfig {
            space: if self.feature_space {
                LocalizerSpace::Feature
            } else {
                LocalizerSpace::Input
            },
            bandwidth: match self.bandwidth {
                Some(h) => Bandwidth::Fixed(h),
                None => Bandwidth::Auto,
            },
        }
    }
}

/// Everything one `ffcp run` needs. Serializes to the JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: MethodSpec,
    pub alpha: f64,
    pub seed: u64,
    pub split_index: SplitSpec,
    pub dataset: DatasetSpec,
    pub ratios: (f64, f64, f64),
    pub train: TrainSettings,
    pub fcp_search: FcpSearchConfig,
    pub fcp_estimator: BandEstimatorConfig,
    pub raps: RapsConfig,
    pub localizer: LocalizerSettings,
    /// Load the point-prediction (or classifier) model from this file
    /// instead of training one.
    pub model_in: Option<PathBuf>,
    /// Save the point-prediction (or classifier) model after training.
    pub model_out: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: MethodSpec::Ffcp,
            alpha: 0.1,
            seed: 0,
            split_index: SplitSpec::Index(DEFAULT_SPLIT_INDEX),
            dataset: DatasetSpec::default(),
            ratios: (0.5, 0.25, 0.25),
            train: TrainSettings::default(),
            fcp_search: FcpSearchConfig::default(),
            fcp_estimator: BandEstimatorConfig::default(),
            raps: RapsConfig {
                delta: 0.02,
                ..RapsConfig::default()
            },
            localizer: LocalizerSettings::default(),
            model_in: None,
            model_out: None,
            out: None,
            format: ReportFormat::Json,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if self.dataset.is_classification()
            != matches!(self.method, MethodSpec::Raps | MethodSpec::Ffraps)
        {
            return Err(Error::InvalidConfig(format!(
                "method {} and dataset {} disagree (classification methods need a \
                 classification dataset)",
                self.method.name(),
                self.dataset.label()
            )));
        }
        Ok(())
    }

    /// Resolve the output path: explicit `out`, else `<FFCP_OUT_DIR or .>/
    /// <default_name>`.
    pub fn resolve_out(&self, default_name: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => {
                let dir = std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| ".".into());
                Path::new(&dir).join(default_name)
            }
        }
    }
}

/// `ffcp gen-data`: write a dataset as CSV and print a short summary.
pub fn execute_gen_data(spec: &DatasetSpec, seed: u64, out: &Path) -> Result<()> {
    let data = spec.build(seed)?;
    write_csv(&data, out)?;
    println!(
        "wrote {} rows x {} features (+{} target column{}) to {}",
        data.len(),
        data.feature_dim(),
        data.target_dim(),
        if data.target_dim() == 1 { "" } else { "s" },
        out.display()
    );
    Ok(())
}

fn prepare_folds(config: &RunConfig, data: &Dataset) -> Result<(Dataset, FoldSplit)> {
    let fold = split(data, config.ratios, config.seed)?;
    // Classification labels stay raw; regression targets are z-scored.
    let (scaled, _) = standardize_with(data, &fold, !config.dataset.is_classification())?;
    Ok((scaled, fold))
}

/// `ffcp run`: train, execute the configured method, return the reports.
pub fn execute_run(config: &RunConfig) -> Result<Vec<BenchReport>> {
    config.validate()?;
    let raw = config.dataset.build(config.seed)?;
    let (data, fold) = prepare_folds(config, &raw)?;
    let label = config.dataset.label();

    if let MethodSpec::Raps | MethodSpec::Ffraps = config.method {
        let classes = match config.dataset {
            DatasetSpec::SyntheticClasses { classes, .. } => classes,
            _ => unreachable!("validated above"),
        };
        let model = match &config.model_in {
            Some(path) => crate::nnkit::MlpModel::load(path)?,
            None => train_classifier_model(
                &data,
                &fold,
                classes,
                &config.train.to_train_config(config.seed),
            )?,
        };
        if let Some(path) = &config.model_out {
            model.save(path)?;
        }
        let raps_config = RapsConfig {
            alpha: config.alpha,
            delta: if config.method == MethodSpec::Raps {
                0.0
            } else {
                config.raps.delta
            },
            ..config.raps
        };
        let run = run_classification_method(
            config.method.name(),
            &model,
            &data,
            &fold,
            &raps_config,
            &label,
            config.seed,
        )?;
        return Ok(vec![run.report]);
    }

    let method = config.method.regression_method().expect("regression");
    let train_cfg = config.train.to_train_config(config.seed);
    let opts = RegressionRunOptions {
        alpha: config.alpha,
        fcp_search: config.fcp_search,
        fcp_estimator: config.fcp_estimator,
        localizer: config.localizer.to_config(),
    };

    let (point_split, sweep) = match config.split_index {
        SplitSpec::Index(i) => (i, false),
        SplitSpec::Sweep => (DEFAULT_SPLIT_INDEX, true),
    };
    let point_model = match &config.model_in {
        Some(path) => crate::nnkit::MlpModel::load(path)?.with_split_index(point_split)?,
        None => train_regression_model(&data, &fold, point_split, &train_cfg)?,
    };
    if let Some(path) = &config.model_out {
        point_model.save(path)?;
    }
    let quantile_model = if config.method.needs_quantile_model() {
        let levels = config
            .train
            .pinball_levels
            .unwrap_or((config.alpha / 2.0, 1.0 - config.alpha / 2.0));
        Some(train_quantile_model(
            &data, &fold, point_split, levels, &train_cfg,
        )?)
    } else {
        None
    };

    if sweep {
        let outcome = run_split_sweep(
            method,
            &point_model,
            quantile_model.as_ref(),
            &data,
            &fold,
            &opts,
            &label,
            config.seed,
        )?;
        let best_split = outcome.splits[outcome.best];
        let mut reports: Vec<BenchReport> =
            outcome.runs.into_iter().map(|r| r.report).collect();
        // The shortest-length split is what the headline tables quote; tag it
        // as an extra aggregate-friendly row.
        let mut best = reports[outcome.best].clone();
        best.method = format!("{}(best-split={})", best.method, best_split);
        reports.push(best);
        Ok(reports)
    } else {
        let run = run_regression_method(
            method,
            RegressionModels {
                point: &point_model,
                quantile_pair: quantile_model.as_ref(),
            },
            &data,
            &fold,
            &opts,
            &label,
            config.seed,
        )?;
        Ok(vec![run.report])
    }
}

/// `ffcp run` including report emission and console summary.
pub fn execute_run_to_file(config: &RunConfig) -> Result<PathBuf> {
    let reports = execute_run(config)?;
    let ext = match config.format {
        ReportFormat::Json => "json",
        ReportFormat::Csv => "csv",
        ReportFormat::Markdown => "md",
    };
    let out = config.resolve_out(&format!("ffcp-run.{ext}"));
    emit_report(&reports, config.format, &out)?;
    for r in &reports {
        println!(
            "{} on {} (seed {}, split {}): coverage {:.4}, length {:.4}, {:.4}s",
            r.method,
            r.dataset,
            r.seed,
            r.split_index,
            r.coverage,
            r.mean_length.unwrap_or(f64::NAN),
            r.runtime_seconds
        );
    }
    println!("report written to {}", out.display());
    Ok(out)
}

/// Cross-product bench configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<MethodSpec>,
    pub seeds: u64,
    pub jobs: usize,
    #[serde(flatten)]
    pub base: RunConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![MethodSpec::Vanilla, MethodSpec::Fcp, MethodSpec::Ffcp],
            seeds: 10,
            jobs: 1,
            base: RunConfig::default(),
        }
    }
}

/// `ffcp bench`: run every (method, seed) pair, aggregate, and emit both the
/// JSON report and the markdown tables. Returns the per-run reports.
pub fn execute_bench(config: &BenchConfig) -> Result<Vec<BenchReport>> {
    if config.methods.is_empty() || config.seeds == 0 {
        return Err(Error::InvalidConfig(
            "bench needs at least one method and one seed".into(),
        ));
    }
    let mut pending: Vec<RunConfig> = Vec::new();
    for &method in &config.methods {
        for seed in 0..config.seeds {
            pending.push(RunConfig {
                method,
                seed,
                ..config.base.clone()
            });
        }
    }

    let jobs = config.jobs.max(1);
    let reports: Vec<BenchReport> = if jobs == 1 {
        let mut all = Vec::new();
        for cfg in &pending {
            all.extend(execute_run(cfg)?);
        }
        all
    } else {
        run_parallel(&pending, jobs)?
    };
    Ok(reports)
}

/// Emit bench outputs: `<stem>.json` and `<stem>.md`.
pub fn execute_bench_to_files(config: &BenchConfig) -> Result<(PathBuf, PathBuf)> {
    let reports = execute_bench(config)?;
    let stem = config.base.resolve_out("ffcp-bench");
    let json_path = stem.with_extension("json");
    let md_path = stem.with_extension("md");
    emit_report(&reports, ReportFormat::Json, &json_path)?;
    emit_report(&reports, ReportFormat::Markdown, &md_path)?;

    let rows = aggregate(&reports);
    for row in &rows {
        println!(
            "{} on {} (split {}, {} seeds): coverage {:.3}±{:.3}, length {:.4}±{:.4}, time {:.4}s",
            row.method,
            row.dataset,
            row.split_index,
            row.seeds,
            row.coverage_mean,
            row.coverage_std,
            row.length_mean,
            row.length_std,
            row.runtime_mean
        );
    }
    if let (Some(fcp), Some(ffcp)) = (
        rows.iter().find(|r| r.method == "fcp"),
        rows.iter().find(|r| r.method == "ffcp"),
    ) {
        println!(
            "faster: fcp/ffcp runtime ratio {:.1}x",
            fcp.runtime_mean / ffcp.runtime_mean.max(1e-12)
        );
    }
    println!(
        "reports written to {} and {}",
        json_path.display(),
        md_path.display()
    );
    Ok((json_path, md_path))
}

/// Simple worker pool over the pending runs. Each run's timed phase is
/// single-threaded; parallelism is across (method, seed) pairs only.
fn run_parallel(pending: &[RunConfig], jobs: usize) -> Result<Vec<BenchReport>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<Vec<BenchReport>>)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(pending.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let outcome = execute_run(&pending[i]);
                results.lock().expect("worker poisoned").push((i, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("worker poisoned");
    results.sort_by_key(|(i, _)| *i);
    let mut all = Vec::new();
    for (_, outcome) in results {
        all.extend(outcome?);
    }
    Ok(all)
}

/// Render the effective config for `--print-config`.
pub fn print_config(config: &RunConfig) -> Result<String> {
    config.to_json()
}

// Re-exported for the binary's summary printing.
pub use crate::bench::ReportFormat as Format;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_round_trips() {
        let config = RunConfig::default();
        let text = config.to_json().unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn method_and_split_parse() {
        assert_eq!("ffcp".parse::<MethodSpec>().unwrap(), MethodSpec::Ffcp);
        assert!("nope".parse::<MethodSpec>().is_err());
        assert_eq!("sweep".parse::<SplitSpec>().unwrap(), SplitSpec::Sweep);
        assert_eq!("3".parse::<SplitSpec>().unwrap(), SplitSpec::Index(3));
        assert!("x".parse::<SplitSpec>().is_err());
    }

    #[test]
    fn classification_method_requires_classification_dataset() {
        let config = RunConfig {
            method: MethodSpec::Raps,
            ..RunConfig::default()
        };
        assert!(config.validate().is_err());
        let config = RunConfig {
            method: MethodSpec::Raps,
            dataset: DatasetSpec::SyntheticClasses {
                n: 100,
                d_x: 5,
                classes: 3,
            },
            ..RunConfig::default()
        };
        assert!(config.validate().is_ok());
    }

    #[test]
    fn small_end_to_end_run() {
        let config = RunConfig {
            method: MethodSpec::Ffcp,
            dataset: DatasetSpec::Synthetic {
                n: 300,
                d_x: 6,
                noise_scale: 1.0,
            },
            train: TrainSettings {
                epochs: 5,
                ..TrainSettings::default()
            },
            ..RunConfig::default()
        };
        let reports = execute_run(&config).unwrap();
        assert_eq!(reports.len(), 1);
        assert!(reports[0].coverage > 0.5);
    }

    #[test]
    fn bench_cross_product_counts() {
        let config = BenchConfig {
            methods: vec![MethodSpec::Vanilla, MethodSpec::Ffcp],
            seeds: 2,
            jobs: 2,
            base: RunConfig {
                dataset: DatasetSpec::Synthetic {
                    n: 200,
                    d_x: 5,
                    noise_scale: 1.0,
                },
                train: TrainSettings {
                    epochs: 3,
                    ..TrainSettings::default()
                },
                ..RunConfig::default()
            },
        };
        let reports = execute_bench(&config).unwrap();
        assert_eq!(reports.len(), 4);
        let rows = aggregate(&reports);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.seeds == 2));
    }
}
