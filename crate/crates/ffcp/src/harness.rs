//! End-to-end method execution: train a model, score a calibration fold,
//! calibrate a quantile, and band every test point.
//!
//! The regression runners handle scalar targets (the coordinate-wise score
//! and band primitives are general; the pipeline here keys bands off a single
//! score column). Timing follows the evaluation protocol: the clock starts at
//! score calculation and stops when the bands are built; training and data
//! preparation stay outside.

use crate::bands::{band_ffcqr, band_fflcp, PredictionBand};
use crate::bench::{
    coverage, group_coverage, mean_band_length, time_phase, BenchReport,
};
use crate::calib::{
    conformal_quantile, localizer_weights, resolve_bandwidth, weighted_conformal_quantile,
    Bandwidth, ConformalQuantile, LocalizerSpace,
};
use crate::data::{Dataset, FoldSplit};
use crate::error::{Error, Result};
use crate::fcp::{fcp_pipeline, BandEstimatorConfig};
use crate::matrix::RowMatrix;
use crate::nnkit::{train, LossKind, MlpModel, OutputKind, TrainConfig};
use crate::raps::{raps_calibrate, raps_predict, GradNormMode, PredictionSet, RapsConfig};
use crate::scores::{
    score_cqr, score_ffcp, score_ffcqr, score_vanilla, FcpSearchConfig, Method, ScoreSet,
};

/// Hidden width of the default architecture.
pub const DEFAULT_HIDDEN_WIDTH: usize = 64;
/// Hidden layers of the default regression architecture.
pub const DEFAULT_HIDDEN_LAYERS: usize = 3;
/// Default feature/head split: two layers in `h`, two in `g`.
pub const DEFAULT_SPLIT_INDEX: usize = 2;

/// `d_x → 64 → 64 → 64 → d_y`.
pub fn default_regression_dims(d_x: usize, d_y: usize) -> Vec<usize> {
    let mut dims = vec![d_x];
    dims.extend(std::iter::repeat(DEFAULT_HIDDEN_WIDTH).take(DEFAULT_HIDDEN_LAYERS));
    dims.push(d_y);
    dims
}

fn fold_features(data: &Dataset, idx: &[usize]) -> RowMatrix {
    data.features.select_rows(idx)
}

fn fold_targets_scalar(data: &Dataset, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| data.targets.get(i, 0)).collect()
}

fn require_scalar_targets(data: &Dataset) -> Result<()> {
    if data.target_dim() != 1 {
        return Err(Error::InvalidConfig(
            "regression runners expect a scalar target column".into(),
        ));
    }
    Ok(())
}

/// Train the default squared-error regression model on the training fold.
pub fn train_regression_model(
    data: &Dataset,
    fold: &FoldSplit,
    split_index: usize,
    config: &TrainConfig,
) -> Result<MlpModel> {
    require_scalar_targets(data)?;
    let model = MlpModel::with_relu_hidden(
        &default_regression_dims(data.feature_dim(), 1),
        split_index,
        OutputKind::Regression { dim: 1 },
        config.seed,
    )?;
    train(
        &model,
        &fold_features(data, &fold.train_idx),
        &data.targets.select_rows(&fold.train_idx),
        config,
    )
}

/// Train the shared-trunk quantile-pair model at the given pinball levels.
pub fn train_quantile_model(
    data: &Dataset,
    fold: &FoldSplit,
    split_index: usize,
    levels: (f64, f64),
    config: &TrainConfig,
) -> Result<MlpModel> {
    require_scalar_targets(data)?;
    let model = MlpModel::with_relu_hidden(
        &default_regression_dims(data.feature_dim(), 2),
        split_index,
        OutputKind::QuantilePair,
        config.seed,
    )?;
    let cfg = TrainConfig {
        loss: LossKind::Pinball {
            lo: levels.0,
            hi: levels.1,
        },
        ..*config
    };
    train(
        &model,
        &fold_features(data, &fold.train_idx),
        &data.targets.select_rows(&fold.train_idx),
        &cfg,
    )
}

/// Train the default softmax classifier: `d_x → 64 → 64 → K`, split before
/// the final two layers.
pub fn train_classifier_model(
    data: &Dataset,
    fold: &FoldSplit,
    classes: usize,
    config: &TrainConfig,
) -> Result<MlpModel> {
    let dims = vec![data.feature_dim(), 64, 64, classes];
    let model = MlpModel::with_relu_hidden(
        &dims,
        1,
        OutputKind::Logits { classes },
        config.seed,
    )?;
    let cfg = TrainConfig {
        loss: LossKind::CrossEntropy,
        ..*config
    };
    train(
        &model,
        &fold_features(data, &fold.train_idx),
        &data.targets.select_rows(&fold.train_idx),
        &cfg,
    )
}

/// Where and how the localized methods weight their calibration scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizerConfig {
    pub space: LocalizerSpace,
    pub bandwidth: Bandwidth,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            space: LocalizerSpace::Feature,
            bandwidth: Bandwidth::Auto,
        }
    }
}

/// Knobs for one regression method run.
#[derive(Debug, Clone)]
pub struct RegressionRunOptions {
    pub alpha: f64,
    pub fcp_search: FcpSearchConfig,
    pub fcp_estimator: BandEstimatorConfig,
    pub localizer: LocalizerConfig,
}

impl Default for RegressionRunOptions {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            fcp_search: FcpSearchConfig::default(),
            fcp_estimator: BandEstimatorConfig::default(),
            localizer: LocalizerConfig::default(),
        }
    }
}

/// One method's end-to-end outcome on one (dataset, fold, model).
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub report: BenchReport,
    pub bands: Vec<PredictionBand>,
    /// Per-test-point coverage indicator.
    pub covered: Vec<bool>,
    /// Scalar calibration scores (column 0).
    pub cal_scores: Vec<f64>,
    /// The same scores with their method tag and any gradient norms.
    pub score_set: ScoreSet,
    /// The global quantile for global methods; None for localized ones.
    pub quantile: Option<ConformalQuantile>,
}

/// The models a regression run may need. `point` drives vanilla/ffcp/fcp and
/// the localized variants; `quantile_pair` drives cqr/ffcqr.
#[derive(Debug, Clone, Copy)]
pub struct RegressionModels<'a> {
    pub point: &'a MlpModel,
    pub quantile_pair: Option<&'a MlpModel>,
}

/// Execute one regression method over the calibration and test folds.
pub fn run_regression_method(
    method: Method,
    models: RegressionModels<'_>,
    data: &Dataset,
    fold: &FoldSplit,
    opts: &RegressionRunOptions,
    dataset_label: &str,
    seed: u64,
) -> Result<MethodRun> {
    require_scalar_targets(data)?;
    if fold.cal_idx.is_empty() || fold.test_idx.is_empty() {
        return Err(Error::Empty("calibration or test fold".into()));
    }
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::InvalidAlpha(opts.alpha));
    }

    let cal_x = fold_features(data, &fold.cal_idx);
    let cal_y = fold_targets_scalar(data, &fold.cal_idx);
    let test_x = fold_features(data, &fold.test_idx);
    let test_y = data.targets.select_rows(&fold.test_idx);

    let outcome = match method {
        Method::Vanilla => run_residual_method(
            models.point, &cal_x, &cal_y, &test_x, opts.alpha, false, None,
        )?,
        Method::Ffcp => run_residual_method(
            models.point, &cal_x, &cal_y, &test_x, opts.alpha, true, None,
        )?,
        Method::Lcp => run_residual_method(
            models.point,
            &cal_x,
            &cal_y,
            &test_x,
            opts.alpha,
            false,
            Some(&opts.localizer),
        )?,
        Method::Fflcp => run_residual_method(
            models.point,
            &cal_x,
            &cal_y,
            &test_x,
            opts.alpha,
            true,
            Some(&opts.localizer),
        )?,
        Method::Cqr => {
            let model = models.quantile_pair.ok_or_else(|| {
                Error::InvalidConfig("cqr needs a quantile-pair model".into())
            })?;
            run_cqr_method(model, &cal_x, &cal_y, &test_x, opts.alpha, false)?
        }
        Method::Ffcqr => {
            let model = models.quantile_pair.ok_or_else(|| {
                Error::InvalidConfig("ffcqr needs a quantile-pair model".into())
            })?;
            run_cqr_method(model, &cal_x, &cal_y, &test_x, opts.alpha, true)?
        }
        Method::Fcp => run_fcp_method(models.point, &cal_x, &cal_y, &test_x, opts)?,
    };

    let RawOutcome {
        bands,
        cal_scores,
        cal_grad_norms,
        quantile,
        seconds,
        floor_hits,
        sound,
    } = outcome;

    let scoring_model = match method {
        Method::Cqr | Method::Ffcqr => models.quantile_pair.expect("checked above"),
        _ => models.point,
    };
    let score_set = ScoreSet::new(
        method,
        RowMatrix::from_flat(cal_scores.clone(), cal_scores.len(), 1)?,
        match cal_grad_norms {
            Some(rows) => Some(RowMatrix::from_rows(&rows)?),
            None => None,
        },
        scoring_model.split_index(),
        floor_hits,
    )?;

    let covered: Vec<bool> = bands
        .iter()
        .enumerate()
        .map(|(i, b)| b.contains(test_y.row(i)))
        .collect::<Result<_>>()?;
    let cov = coverage(&bands, &test_y)?;
    let (mean_length, infinite_band_count) = match mean_band_length(&bands) {
        Ok((len, count)) => (Some(len), count),
        Err(_) => (None, bands.len()),
    };
    let group = group_coverage(&bands, &test_y)?;
    let (sound_mean_length, sound_coverage) = match sound {
        Some(sound_bands) => {
            let c = coverage(&sound_bands, &test_y)?;
            let l = mean_band_length(&sound_bands).map(|(l, _)| l).unwrap_or(f64::NAN);
            (Some(l), Some(c))
        }
        None => (None, None),
    };

    let report = BenchReport {
        method: method.name().into(),
        dataset: dataset_label.into(),
        seed,
        split_index: models.point.split_index(),
        alpha: opts.alpha,
        coverage: cov,
        mean_length,
        group_coverage_min: Some(group.min),
        runtime_seconds: seconds,
        score_correlation: None,
        infinite_band_count,
        grad_floor_hits: floor_hits,
        sound_mean_length,
        sound_coverage,
    };
    Ok(MethodRun {
        report,
        bands,
        covered,
        cal_scores,
        score_set,
        quantile,
    })
}

struct RawOutcome {
    bands: Vec<PredictionBand>,
    cal_scores: Vec<f64>,
    /// One row per calibration point when the method divides by gradients
    /// (two columns for the quantile-pair heads).
    cal_grad_norms: Option<Vec<Vec<f64>>>,
    quantile: Option<ConformalQuantile>,
    seconds: f64,
    floor_hits: usize,
    sound: Option<Vec<PredictionBand>>,
}

/// Vanilla / FFCP / LCP / FFLCP share one skeleton: absolute residuals,
/// optionally gradient-normalized, with a global or localized quantile.
fn run_residual_method(
    model: &MlpModel,
    cal_x: &RowMatrix,
    cal_y: &[f64],
    test_x: &RowMatrix,
    alpha: f64,
    gradient_normalized: bool,
    localizer: Option<&LocalizerConfig>,
) -> Result<RawOutcome> {
    let method = match (gradient_normalized, localizer.is_some()) {
        (false, false) => Method::Vanilla,
        (true, false) => Method::Ffcp,
        (false, true) => Method::Lcp,
        (true, true) => Method::Fflcp,
    };
    let (result, seconds) = time_phase(|| -> Result<_> {
        let mut floor_hits = 0usize;
        let n_cal = cal_x.rows();

        // Calibration scores (and features, when the localizer needs them).
        let mut scores = Vec::with_capacity(n_cal);
        let mut grad_norm_rows = Vec::with_capacity(if gradient_normalized { n_cal } else { 0 });
        let keep_features = matches!(
            localizer,
            Some(LocalizerConfig {
                space: LocalizerSpace::Feature,
                ..
            })
        );
        let mut cal_points = Vec::with_capacity(if localizer.is_some() { n_cal } else { 0 });
        for i in 0..n_cal {
            let view = model.forward(cal_x.row(i))?;
            let y = [cal_y[i]];
            let s = if gradient_normalized {
                let jac = model.head_jacobian_at(&view.feature)?;
                let (s, hits) = score_ffcp(&y, &view.prediction, &jac.row_norms)?;
                floor_hits += hits;
                grad_norm_rows.push(jac.row_norms);
                s[0]
            } else {
                score_vanilla(&y, &view.prediction)?[0]
            };
            scores.push(s);
            if let Some(cfg) = localizer {
                cal_points.push(match cfg.space {
                    LocalizerSpace::Feature => view.feature,
                    LocalizerSpace::Input => cal_x.row(i).to_vec(),
                });
            }
        }

        let global_quantile = if localizer.is_none() {
            Some(conformal_quantile(&scores, alpha)?)
        } else {
            None
        };
        let (cal_matrix, bandwidth) = if let Some(cfg) = localizer {
            let m = RowMatrix::from_rows(&cal_points)?;
            let h = resolve_bandwidth(&m, cfg.bandwidth)?;
            (Some((m, keep_features)), h)
        } else {
            (None, 1.0)
        };

        // Test bands.
        let mut bands = Vec::with_capacity(test_x.rows());
        for i in 0..test_x.rows() {
            let view = model.forward(test_x.row(i))?;
            let grad_norms = if gradient_normalized {
                model.head_jacobian_at(&view.feature)?.row_norms
            } else {
                vec![1.0; view.prediction.len()]
            };
            let q = match (&global_quantile, &cal_matrix, localizer) {
                (Some(q), _, _) => *q,
                (None, Some((m, use_feature)), Some(_)) => {
                    let query: &[f64] = if *use_feature {
                        &view.feature
                    } else {
                        test_x.row(i)
                    };
                    let w = localizer_weights(query, m, Bandwidth::Fixed(bandwidth))?;
                    weighted_conformal_quantile(&scores, &w, alpha)?
                }
                _ => unreachable!("localizer config implies a calibration matrix"),
            };
            let mut band = band_fflcp(&view.prediction, &grad_norms, &q);
            band.method = method;
            bands.push(band);
        }
        Ok((bands, scores, grad_norm_rows, global_quantile, floor_hits))
    });
    let (bands, cal_scores, grad_norm_rows, quantile, floor_hits) = result?;
    Ok(RawOutcome {
        bands,
        cal_scores,
        cal_grad_norms: gradient_normalized.then_some(grad_norm_rows),
        quantile,
        seconds,
        floor_hits,
        sound: None,
    })
}

fn run_cqr_method(
    model: &MlpModel,
    cal_x: &RowMatrix,
    cal_y: &[f64],
    test_x: &RowMatrix,
    alpha: f64,
    gradient_normalized: bool,
) -> Result<RawOutcome> {
    if model.output_dim() != 2 {
        return Err(Error::InvalidConfig(
            "cqr methods need a two-output quantile model".into(),
        ));
    }
    let method = if gradient_normalized {
        Method::Ffcqr
    } else {
        Method::Cqr
    };
    let (result, seconds) = time_phase(|| -> Result<_> {
        let mut floor_hits = 0usize;
        let mut scores = Vec::with_capacity(cal_x.rows());
        let mut grad_norm_rows = Vec::new();
        for i in 0..cal_x.rows() {
            let view = model.forward(cal_x.row(i))?;
            let (lo, hi) = (view.prediction[0], view.prediction[1]);
            let s = if gradient_normalized {
                let jac = model.head_jacobian_at(&view.feature)?;
                let (s, hits) =
                    score_ffcqr(cal_y[i], lo, hi, jac.row_norms[0], jac.row_norms[1])?;
                floor_hits += hits;
                grad_norm_rows.push(jac.row_norms);
                s
            } else {
                score_cqr(cal_y[i], lo, hi)?
            };
            scores.push(s);
        }
        let q = conformal_quantile(&scores, alpha)?;

        let mut bands = Vec::with_capacity(test_x.rows());
        for i in 0..test_x.rows() {
            let view = model.forward(test_x.row(i))?;
            let (lo, hi) = (view.prediction[0], view.prediction[1]);
            let (gl, gh) = if gradient_normalized {
                let jac = model.head_jacobian_at(&view.feature)?;
                (jac.row_norms[0], jac.row_norms[1])
            } else {
                (1.0, 1.0)
            };
            bands.push(band_ffcqr(lo, hi, gl, gh, &q, method));
        }
        Ok((bands, scores, grad_norm_rows, q, floor_hits))
    });
    let (bands, cal_scores, grad_norm_rows, quantile, floor_hits) = result?;
    Ok(RawOutcome {
        bands,
        cal_scores,
        cal_grad_norms: gradient_normalized.then_some(grad_norm_rows),
        quantile: Some(quantile),
        seconds,
        floor_hits,
        sound: None,
    })
}

fn run_fcp_method(
    model: &MlpModel,
    cal_x: &RowMatrix,
    cal_y: &[f64],
    test_x: &RowMatrix,
    opts: &RegressionRunOptions,
) -> Result<RawOutcome> {
    let run = fcp_pipeline(
        model,
        cal_x,
        cal_y,
        test_x,
        opts.alpha,
        &opts.fcp_search,
        &opts.fcp_estimator,
    )?;
    let to_band = |lower: &[f64], upper: &[f64], center: &[f64]| PredictionBand {
        lower: lower.to_vec(),
        upper: upper.to_vec(),
        center: center.to_vec(),
        method: Method::Fcp,
    };
    let bands: Vec<PredictionBand> = run
        .bands
        .iter()
        .map(|b| {
            to_band(
                &b.estimate.sampled_interval.lower,
                &b.estimate.sampled_interval.upper,
                &b.prediction,
            )
        })
        .collect();
    let sound: Vec<PredictionBand> = run
        .bands
        .iter()
        .map(|b| {
            to_band(
                &b.estimate.sound_interval.lower,
                &b.estimate.sound_interval.upper,
                &b.prediction,
            )
        })
        .collect();
    Ok(RawOutcome {
        bands,
        cal_scores: run.calibration_scores.iter().map(|s| s.score).collect(),
        cal_grad_norms: None,
        quantile: Some(run.quantile),
        seconds: run.phase_seconds,
        floor_hits: 0,
        sound: Some(sound),
    })
}

/// Outcome of a split sweep: every per-split run plus the index of the
/// shortest-mean-length one.
#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<MethodRun>,
    pub splits: Vec<usize>,
    pub best: usize,
}

/// Run `method` at every split index (0 ..= layer count) and pick the run
/// with the shortest finite mean band length.
pub fn run_split_sweep(
    method: Method,
    model: &MlpModel,
    quantile_model: Option<&MlpModel>,
    data: &Dataset,
    fold: &FoldSplit,
    opts: &RegressionRunOptions,
    dataset_label: &str,
    seed: u64,
) -> Result<SweepOutcome> {
    let mut runs = Vec::new();
    let mut splits = Vec::new();
    for split in 0..=model.n_layers() {
        let split_model = model.with_split_index(split)?;
        let split_quantile = match quantile_model {
            Some(m) => Some(m.with_split_index(split)?),
            None => None,
        };
        let run = run_regression_method(
            method,
            RegressionModels {
                point: &split_model,
                quantile_pair: split_quantile.as_ref(),
            },
            data,
            fold,
            opts,
            dataset_label,
            seed,
        )?;
        runs.push(run);
        splits.push(split);
    }
    let best = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.report.mean_length.map(|len| (i, len)))
        .min_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite lengths"))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Empty("finite-length sweep runs".into()))?;
    Ok(SweepOutcome { runs, splits, best })
}

/// One classification method's outcome.
#[derive(Debug, Clone)]
pub struct ClassificationRun {
    pub report: BenchReport,
    pub sets: Vec<PredictionSet>,
    pub tau_hat: f64,
    pub mean_set_size: f64,
}

/// Run RAPS (`config.delta == 0`) or FFRAPS over the folds. The report's
/// `mean_length` column carries the mean prediction-set size.
pub fn run_classification_method(
    method_name: &str,
    model: &MlpModel,
    data: &Dataset,
    fold: &FoldSplit,
    config: &RapsConfig,
    dataset_label: &str,
    seed: u64,
) -> Result<ClassificationRun> {
    let classes = match model.output_kind() {
        OutputKind::Logits { classes } => classes,
        _ => {
            return Err(Error::InvalidConfig(
                "classification runner needs a logits model".into(),
            ))
        }
    };
    let cal_x = fold_features(data, &fold.cal_idx);
    let cal_labels: Vec<usize> = fold
        .cal_idx
        .iter()
        .map(|&i| data.targets.get(i, 0) as usize)
        .collect();
    let test_x = fold_features(data, &fold.test_idx);
    let test_labels: Vec<usize> = fold
        .test_idx
        .iter()
        .map(|&i| data.targets.get(i, 0) as usize)
        .collect();

    let grad_norm = |view: &crate::nnkit::FeatureView| -> Result<f64> {
        if config.delta == 0.0 {
            return Ok(1.0);
        }
        let jac = model.head_jacobian_at(&view.feature)?;
        Ok(match config.grad_norm_mode {
            GradNormMode::TopLogit => {
                let top = view
                    .prediction
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite logits"))
                    .map(|(k, _)| k)
                    .expect("at least one class");
                jac.row_norms[top]
            }
            GradNormMode::Frobenius => jac.frobenius_norm(),
        })
    };

    let (result, seconds) = time_phase(|| -> Result<_> {
        let mut cal_logits = Vec::with_capacity(cal_x.rows());
        let mut cal_norms = Vec::with_capacity(cal_x.rows());
        for i in 0..cal_x.rows() {
            let view = model.forward(cal_x.row(i))?;
            cal_norms.push(grad_norm(&view)?);
            cal_logits.push(view.prediction);
        }
        let cal_logits = RowMatrix::from_rows(&cal_logits)?;
        let tau_hat = raps_calibrate(&cal_logits, &cal_labels, &cal_norms, config)?;

        let mut sets = Vec::with_capacity(test_x.rows());
        for i in 0..test_x.rows() {
            let view = model.forward(test_x.row(i))?;
            let norm = grad_norm(&view)?;
            sets.push(raps_predict(&view.prediction, norm, tau_hat, config)?);
        }
        Ok((tau_hat, sets))
    });
    let (tau_hat, sets) = result?;

    let covered = sets
        .iter()
        .zip(&test_labels)
        .filter(|(set, &label)| set.contains(label))
        .count();
    let coverage = covered as f64 / sets.len().max(1) as f64;
    let mean_set_size =
        sets.iter().map(|s| s.size() as f64).sum::<f64>() / sets.len().max(1) as f64;
    for set in &sets {
        debug_assert!(set.size() >= 1 && set.size() <= classes);
    }

    let report = BenchReport {
        method: method_name.into(),
        dataset: dataset_label.into(),
        seed,
        split_index: model.split_index(),
        alpha: config.alpha,
        coverage,
        mean_length: Some(mean_set_size),
        group_coverage_min: None,
        runtime_seconds: seconds,
        score_correlation: None,
        infinite_band_count: 0,
        grad_floor_hits: 0,
        sound_mean_length: None,
        sound_coverage: None,
    };
    Ok(ClassificationRun {
        report,
        sets,
        tau_hat,
        mean_set_size,
    })
}
