//! Evaluation metrics, timing, statistical checks, and report emission.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bands::PredictionBand;
use crate::calib::conformal_quantile;
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// One experiment's metrics: a (method, dataset, seed, split) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub split_index: usize,
    pub alpha: f64,
    /// Fraction of test points covered (all-coordinate conjunction).
    pub coverage: f64,
    /// Mean finite band length (mean prediction-set size for classifiers);
    /// absent when every band was infinite.
    pub mean_length: Option<f64>,
    /// Minimum coverage over response tertiles; absent for classifiers.
    pub group_coverage_min: Option<f64>,
    /// Wall-clock seconds of the score→band phase.
    pub runtime_seconds: f64,
    /// Pearson correlation against a companion score set, when computed.
    pub score_correlation: Option<f64>,
    pub infinite_band_count: usize,
    /// Gradient-norm floor activations during scoring.
    pub grad_floor_hits: usize,
    /// Mean length under the sound (over-approximating) band, for methods
    /// that carry two estimates.
    pub sound_mean_length: Option<f64>,
    /// Coverage under the sound band.
    pub sound_coverage: Option<f64>,
}

/// Fraction of test points whose target lies in the band (every coordinate).
pub fn coverage(bands: &[PredictionBand], y_test: &RowMatrix) -> Result<f64> {
    if bands.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    if bands.len() != y_test.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} bands vs {} test targets",
            bands.len(),
            y_test.rows()
        )));
    }
    let mut hits = 0usize;
    for (i, band) in bands.iter().enumerate() {
        if band.contains(y_test.row(i))? {
            hits += 1;
        }
    }
    Ok(hits as f64 / bands.len() as f64)
}

/// Mean over test points of the coordinate-averaged band width. Infinite
/// bands are excluded from the mean and counted separately.
pub fn mean_band_length(bands: &[PredictionBand]) -> Result<(f64, usize)> {
    if bands.is_empty() {
        return Err(Error::Empty("band list".into()));
    }
    let mut total = 0.0;
    let mut finite = 0usize;
    let mut infinite = 0usize;
    for band in bands {
        if band.is_infinite() {
            infinite += 1;
        } else {
            total += band.mean_width();
            finite += 1;
        }
    }
    if finite == 0 {
        return Err(Error::Empty("finite band list (all bands infinite)".into()));
    }
    Ok((total / finite as f64, infinite))
}

/// Coverage within each response tertile and the minimum across them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCoverage {
    /// Low / middle / high response groups. NaN marks an empty group.
    pub per_group: [f64; 3],
    pub min: f64,
    pub group_sizes: [usize; 3],
}

/// Split scalar test targets at their empirical tertiles and report coverage
/// per group. Boundary ties go to the lower group; empty groups are skipped
/// by the minimum.
pub fn group_coverage(bands: &[PredictionBand], y_test: &RowMatrix) -> Result<GroupCoverage> {
    if y_test.cols() != 1 {
        return Err(Error::InvalidConfig(
            "group coverage needs scalar targets".into(),
        ));
    }
    let n = y_test.rows();
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "group coverage needs at least 3 test points, got {n}"
        )));
    }
    if bands.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} bands vs {n} test targets",
            bands.len()
        )));
    }
    let mut sorted: Vec<f64> = y_test.column(0);
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite targets"));
    let t1 = sorted[(n as f64 / 3.0).ceil() as usize - 1];
    let t2 = sorted[(2.0 * n as f64 / 3.0).ceil() as usize - 1];

    let mut hits = [0usize; 3];
    let mut sizes = [0usize; 3];
    for (i, band) in bands.iter().enumerate() {
        let y = y_test.get(i, 0);
        let g = if y <= t1 {
            0
        } else if y <= t2 {
            1
        } else {
            2
        };
        sizes[g] += 1;
        if band.contains(&[y])? {
            hits[g] += 1;
        }
    }
    let per_group = [0, 1, 2].map(|g| {
        if sizes[g] == 0 {
            f64::NAN
        } else {
            hits[g] as f64 / sizes[g] as f64
        }
    });
    let min = per_group
        .iter()
        .filter(|v| !v.is_nan())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(GroupCoverage {
        per_group,
        min,
        group_sizes: sizes,
    })
}

/// Run a closure under a monotonic wall clock. The protocol times exactly the
/// score→quantile→band phase; callers keep training and data loading outside.
pub fn time_phase<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let result = f();
    (result, start.elapsed().as_secs_f64())
}

/// Standard Pearson correlation.
pub fn score_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} scores",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidConfig(
            "correlation needs at least 2 points".into(),
        ));
    }
    let n = a.len() as f64;
    let (ma, mb) = (
        a.iter().sum::<f64>() / n,
        b.iter().sum::<f64>() / n,
    );
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::InvalidConfig(
            "correlation undefined for zero-variance scores".into(),
        ));
    }
    Ok(num / (va.sqrt() * vb.sqrt()))
}

/// Configured constants for the expansion inequality; unknowable in practice,
/// so they are reported with the measurements rather than asserted.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HolderConstants {
    pub l: f64,
    pub exponent: f64,
    pub c: f64,
}

impl Default for HolderConstants {
    fn default() -> Self {
        Self {
            l: 1.0,
            exponent: 1.0,
            c: 1.0,
        }
    }
}

/// Gap statistics between one score distribution and its conformal quantile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquareConditionReport {
    pub space: String,
    /// Mean of `Q - s` (signed).
    pub mean_gap_signed: f64,
    /// Mean of `|Q - s|`.
    pub mean_gap_abs: f64,
    pub quantile: f64,
    /// Std of the quantile over bootstrap resamples (quantile stability).
    pub quantile_bootstrap_std: f64,
    pub n: usize,
}

/// Output-space vs feature-normalized gap reports plus the two sides of the
/// expansion inequality under the configured constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SquareConditionPair {
    pub output: SquareConditionReport,
    pub feature_normalized: SquareConditionReport,
    pub holder: HolderConstants,
    /// `L · mean|Q_f - s_f|^exponent`
    pub expansion_lhs: f64,
    /// `mean(Q_o - s_o) - 2·max(L,1)·(c/√n)^min(exponent,1)`
    pub expansion_rhs: f64,
}

const BOOTSTRAP_ROUNDS: usize = 50;

fn gap_report(space: &str, scores: &[f64], alpha: f64) -> Result<SquareConditionReport> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::Empty("score set".into()));
    }
    let q = conformal_quantile(scores, alpha)?;
    if !q.is_finite() {
        return Err(Error::InvalidConfig(
            "square-condition report needs a finite quantile".into(),
        ));
    }
    let mean_gap_signed = scores.iter().map(|s| q.value - s).sum::<f64>() / n as f64;
    let mean_gap_abs = scores.iter().map(|s| (q.value - s).abs()).sum::<f64>() / n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(0x51a5);
    let mut resample = vec![0.0; n];
    let mut quantiles = Vec::with_capacity(BOOTSTRAP_ROUNDS);
    for _ in 0..BOOTSTRAP_ROUNDS {
        for slot in resample.iter_mut() {
            *slot = scores[rng.gen_range(0..n)];
        }
        let q = conformal_quantile(&resample, alpha)?;
        if q.is_finite() {
            quantiles.push(q.value);
        }
    }
    let quantile_bootstrap_std = if quantiles.len() > 1 {
        let m = quantiles.iter().sum::<f64>() / quantiles.len() as f64;
        (quantiles.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / quantiles.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(SquareConditionReport {
        space: space.into(),
        mean_gap_signed,
        mean_gap_abs,
        quantile: q.value,
        quantile_bootstrap_std,
        n,
    })
}

/// Compare quantile gaps in the output space vs the feature-normalized space
/// over the same calibration fold. Reports; asserts nothing.
pub fn square_condition_check(
    scores_output: &[f64],
    scores_feature_normalized: &[f64],
    alpha: f64,
    holder: HolderConstants,
) -> Result<SquareConditionPair> {
    if scores_output.len() != scores_feature_normalized.len() {
        return Err(Error::DimensionMismatch(
            "square-condition score sets must share the calibration fold".into(),
        ));
    }
    let output = gap_report("output", scores_output, alpha)?;
    let feature_normalized =
        gap_report("feature-normalized", scores_feature_normalized, alpha)?;

    let n = scores_output.len() as f64;
    let mean_abs_pow = scores_feature_normalized
        .iter()
        .map(|s| (feature_normalized.quantile - s).abs().powf(holder.exponent))
        .sum::<f64>()
        / n;
    let expansion_lhs = holder.l * mean_abs_pow;
    let expansion_rhs = output.mean_gap_signed
        - 2.0 * holder.l.max(1.0) * (holder.c / n.sqrt()).powf(holder.exponent.min(1.0));
    Ok(SquareConditionPair {
        output,
        feature_normalized,
        holder,
        expansion_lhs,
        expansion_rhs,
    })
}

/// Report output format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::InvalidConfig(format!(
                "unknown report format {other:?} (expected json, csv, or markdown)"
            ))),
        }
    }
}

/// Versioned envelope for JSON report files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub reports: Vec<BenchReport>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Serialize reports to the requested format at `path`. Field order is fixed
/// by the struct definitions, so output is deterministic.
pub fn emit_report(
    reports: &[BenchReport],
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Empty("report list".into()));
    }
    let text = render_report(reports, format)?;
    fs::write(path, text)?;
    Ok(())
}

/// Render without touching the filesystem.
pub fn render_report(reports: &[BenchReport], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => {
            let file = ReportFile {
                schema_version: REPORT_SCHEMA_VERSION,
                reports: reports.to_vec(),
            };
            let mut s = serde_json::to_string_pretty(&file)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "method,dataset,seed,split_index,alpha,coverage,mean_length,group_coverage_min,runtime_seconds,score_correlation,infinite_band_count,grad_floor_hits,sound_mean_length,sound_coverage\n",
            );
            for r in reports {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.method,
                    r.dataset,
                    r.seed,
                    r.split_index,
                    r.alpha,
                    r.coverage,
                    opt(r.mean_length),
                    opt(r.group_coverage_min),
                    r.runtime_seconds,
                    opt(r.score_correlation),
                    r.infinite_band_count,
                    r.grad_floor_hits,
                    opt(r.sound_mean_length),
                    opt(r.sound_coverage),
                ));
            }
            out
        }
        ReportFormat::Markdown => render_markdown(reports),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Aggregate of one (method, dataset, split) cell over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub split_index: usize,
    pub seeds: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    pub length_mean: f64,
    pub length_std: f64,
    pub runtime_mean: f64,
    pub runtime_std: f64,
}

/// Mean ± population-std per (method, dataset, split) across seeds, in first-
/// appearance order.
pub fn aggregate(reports: &[BenchReport]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in reports {
        let key = (r.method.clone(), r.dataset.clone(), r.split_index);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.iter()
        .map(|(method, dataset, split)| {
            let cell: Vec<&BenchReport> = reports
                .iter()
                .filter(|r| &r.method == method && &r.dataset == dataset && r.split_index == *split)
                .collect();
            let stat = |f: &dyn Fn(&BenchReport) -> f64| -> (f64, f64) {
                let vals: Vec<f64> = cell.iter().map(|r| f(r)).collect();
                mean_std(&vals)
            };
            let (coverage_mean, coverage_std) = stat(&|r| r.coverage);
            let (length_mean, length_std) = stat(&|r| r.mean_length.unwrap_or(f64::NAN));
            let (runtime_mean, runtime_std) = stat(&|r| r.runtime_seconds);
            AggregateRow {
                method: method.clone(),
                dataset: dataset.clone(),
                split_index: *split,
                seeds: cell.len(),
                coverage_mean,
                coverage_std,
                length_mean,
                length_std,
                runtime_mean,
                runtime_std,
            }
        })
        .collect()
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn render_markdown(reports: &[BenchReport]) -> String {
    let rows = aggregate(reports);
    let mut out = String::new();

    out.push_str("## Coverage and band length\n\n");
    out.push_str("| dataset | method | split | coverage | length | seeds |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in &rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.3} ± {:.3} | {:.4} ± {:.4} | {} |\n",
            r.dataset,
            r.method,
            r.split_index,
            100.0 * r.coverage_mean,
            100.0 * r.coverage_std,
            r.length_mean,
            r.length_std,
            r.seeds
        ));
    }

    out.push_str("\n## Runtime (seconds)\n\n");
    out.push_str("| dataset | method | time | faster |\n");
    out.push_str("|---|---|---|---|\n");
    for r in &rows {
        // FASTER column: FCP time over this method's time, when both exist.
        let faster = rows
            .iter()
            .find(|other| {
                other.dataset == r.dataset && other.method == "fcp" && r.method == "ffcp"
            })
            .map(|fcp| format!("{:.0}x", fcp.runtime_mean / r.runtime_mean.max(1e-12)))
            .unwrap_or_default();
        out.push_str(&format!(
            "| {} | {} | {:.4} ± {:.4} | {} |\n",
            r.dataset, r.method, r.runtime_mean, r.runtime_std, faster
        ));
    }
    out
}
