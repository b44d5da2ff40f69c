//! The FCP baseline: surrogate-feature scores plus band estimation that maps
//! the feature-space ball `{v : ‖v - v̂‖ ≤ Q}` into an output interval.
//!
//! Two estimators bracket the true image of the ball:
//! - interval-bound propagation over the enclosing box (sound outer bound),
//! - min/max of the head over sampled ball points plus the local
//!   gradient-direction extremes (inner estimate; exact for affine heads).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::calib::{conformal_quantile, ConformalQuantile};
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::nnkit::{Activation, MlpModel};
use crate::scores::{score_fcp_at_feature, FcpScore, FcpSearchConfig};

/// Per-output interval.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputInterval {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl OutputInterval {
    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn contains_interval(&self, inner: &OutputInterval) -> bool {
        self.contains_interval_with_tol(inner, 0.0)
    }

    /// Containment up to a relative rounding allowance; the two estimators
    /// compute coinciding bounds in different operation orders, so exact
    /// comparison can fail by an ulp when the head is affine.
    pub fn contains_interval_with_tol(&self, inner: &OutputInterval, tol: f64) -> bool {
        let slack = |v: f64| tol * (1.0 + v.abs());
        self.lower
            .iter()
            .zip(&inner.lower)
            .all(|(outer, inner)| *outer <= inner + slack(*inner))
            && self
                .upper
                .iter()
                .zip(&inner.upper)
                .all(|(outer, inner)| *outer >= inner - slack(*inner))
    }
}

/// Both band estimates for one test point.
#[derive(Debug, Clone)]
pub struct BandEstimate {
    /// Sound over-approximation from interval propagation.
    pub sound_interval: OutputInterval,
    /// Under-approximation from ball sampling.
    pub sampled_interval: OutputInterval,
    pub n_samples: usize,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandEstimatorConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BandEstimatorConfig {
    fn default() -> Self {
        Self {
            n_samples: 1024,
            seed: 0,
        }
    }
}

/// Sound outer bound: propagate the box `v̂ ± Q` (which contains the L2 ball)
/// through the head with interval arithmetic.
pub fn estimate_band_ibp(model: &MlpModel, v_hat: &[f64], radius: f64) -> Result<OutputInterval> {
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "radius must be finite and >= 0, got {radius}"
        )));
    }
    if v_hat.len() != model.feature_dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature has {} entries, head expects {}",
            v_hat.len(),
            model.feature_dim()
        )));
    }
    let mut lower: Vec<f64> = v_hat.iter().map(|v| v - radius).collect();
    let mut upper: Vec<f64> = v_hat.iter().map(|v| v + radius).collect();
    for layer in &model.layers()[model.split_index()..] {
        let mut new_lower = Vec::with_capacity(layer.out_dim());
        let mut new_upper = Vec::with_capacity(layer.out_dim());
        for o in 0..layer.out_dim() {
            let mut lo = layer.bias()[o];
            let mut hi = lo;
            for (k, &w) in layer.weight_row(o).iter().enumerate() {
                // Positive weights carry lower→lower; negative weights flip.
                if w >= 0.0 {
                    lo += w * lower[k];
                    hi += w * upper[k];
                } else {
                    lo += w * upper[k];
                    hi += w * lower[k];
                }
            }
            if layer.activation() == Activation::Relu {
                lo = lo.max(0.0);
                hi = hi.max(0.0);
            }
            new_lower.push(lo);
            new_upper.push(hi);
        }
        lower = new_lower;
        upper = new_upper;
    }
    Ok(OutputInterval { lower, upper })
}

/// Inner estimate: min/max of the head over `v̂`, the local gradient-direction
/// extremes `v̂ ± Q·∇g(v̂)ⱼ/‖∇g(v̂)ⱼ‖`, and `n_samples` random points drawn
/// alternately from the radius-Q sphere and ball.
///
/// Deterministic given the seed, and sample draws form a prefix sequence, so
/// growing `n_samples` with the same seed only widens the interval.
pub fn estimate_band_sampling(
    model: &MlpModel,
    v_hat: &[f64],
    radius: f64,
    config: &BandEstimatorConfig,
) -> Result<OutputInterval> {
    if config.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    if !(radius >= 0.0) || !radius.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "radius must be finite and >= 0, got {radius}"
        )));
    }
    let d_v = model.feature_dim();
    if v_hat.len() != d_v {
        return Err(Error::DimensionMismatch(format!(
            "feature has {} entries, head expects {d_v}",
            v_hat.len()
        )));
    }

    let center = model.head_forward(v_hat)?;
    let mut lower = center.clone();
    let mut upper = center.clone();
    let absorb = |values: &[f64], lower: &mut [f64], upper: &mut [f64]| {
        for (j, &v) in values.iter().enumerate() {
            if v < lower[j] {
                lower[j] = v;
            }
            if v > upper[j] {
                upper[j] = v;
            }
        }
    };

    if radius == 0.0 {
        return Ok(OutputInterval { lower, upper });
    }

    // Local gradient-direction extremes; for affine heads these are the true
    // extreme points of the ball image.
    let jac = model.head_jacobian_at(v_hat)?;
    let mut probe = vec![0.0; d_v];
    for j in 0..jac.out_dim {
        let norm = jac.row_norms[j];
        if norm == 0.0 {
            continue;
        }
        for sign in [1.0, -1.0] {
            let row = jac.row(j);
            for (k, p) in probe.iter_mut().enumerate() {
                *p = v_hat[k] + sign * radius * row[k] / norm;
            }
            let out = model.head_forward(&probe)?;
            absorb(&out, &mut lower, &mut upper);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut direction = vec![0.0; d_v];
    for i in 0..config.n_samples {
        // Uniform direction; even draws stay on the sphere, odd draws scale
        // into the ball with the usual u^(1/d) radius law.
        let mut norm_sq = 0.0;
        for d in direction.iter_mut() {
            let g: f64 = rng.sample(StandardNormal);
            *d = g;
            norm_sq += g * g;
        }
        let norm = norm_sq.sqrt().max(1e-300);
        let r = if i % 2 == 0 {
            radius
        } else {
            let u: f64 = rng.gen_range(0.0..1.0);
            radius * u.powf(1.0 / d_v as f64)
        };
        for (k, p) in probe.iter_mut().enumerate() {
            *p = v_hat[k] + r * direction[k] / norm;
        }
        let out = model.head_forward(&probe)?;
        absorb(&out, &mut lower, &mut upper);
    }
    Ok(OutputInterval { lower, upper })
}

/// One test point's outcome in the FCP pipeline.
#[derive(Debug, Clone)]
pub struct FcpBandResult {
    pub estimate: BandEstimate,
    pub prediction: Vec<f64>,
}

/// Full FCP run over a calibration and test fold.
#[derive(Debug, Clone)]
pub struct FcpRun {
    pub calibration_scores: Vec<FcpScore>,
    pub quantile: ConformalQuantile,
    pub bands: Vec<FcpBandResult>,
    /// Wall-clock seconds of the score+quantile+band phase only.
    pub phase_seconds: f64,
}

/// Score the calibration fold, take the conformal quantile, and estimate the
/// band for every test point. Only the score→band phase is timed; the model
/// is assumed trained.
pub fn fcp_pipeline(
    model: &MlpModel,
    cal_features: &RowMatrix,
    cal_targets: &[f64],
    test_features: &RowMatrix,
    alpha: f64,
    search: &FcpSearchConfig,
    estimator: &BandEstimatorConfig,
) -> Result<FcpRun> {
    if cal_features.rows() == 0 {
        return Err(Error::Empty("calibration fold".into()));
    }
    if cal_features.rows() != cal_targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} calibration rows vs {} targets",
            cal_features.rows(),
            cal_targets.len()
        )));
    }

    let start = std::time::Instant::now();

    let mut calibration_scores = Vec::with_capacity(cal_targets.len());
    for i in 0..cal_features.rows() {
        let v_hat = model.forward(cal_features.row(i))?.feature;
        calibration_scores.push(score_fcp_at_feature(
            model,
            &v_hat,
            cal_targets[i],
            search,
        )?);
    }
    let raw: Vec<f64> = calibration_scores.iter().map(|s| s.score).collect();
    let quantile = conformal_quantile(&raw, alpha)?;

    let mut bands = Vec::with_capacity(test_features.rows());
    for i in 0..test_features.rows() {
        let view = model.forward(test_features.row(i))?;
        let estimate = if quantile.is_finite() {
            let sound = estimate_band_ibp(model, &view.feature, quantile.value)?;
            let sampled = estimate_band_sampling(model, &view.feature, quantile.value, estimator)?;
            debug_assert!(sound.contains_interval_with_tol(&sampled, 1e-9));
            BandEstimate {
                sound_interval: sound,
                sampled_interval: sampled,
                n_samples: estimator.n_samples,
                radius: quantile.value,
            }
        } else {
            let d_y = model.output_dim();
            let all = OutputInterval {
                lower: vec![f64::NEG_INFINITY; d_y],
                upper: vec![f64::INFINITY; d_y],
            };
            BandEstimate {
                sound_interval: all.clone(),
                sampled_interval: all,
                n_samples: estimator.n_samples,
                radius: f64::INFINITY,
            }
        };
        bands.push(FcpBandResult {
            estimate,
            prediction: view.prediction,
        });
    }

    let phase_seconds = start.elapsed().as_secs_f64();
    Ok(FcpRun {
        calibration_scores,
        quantile,
        bands,
        phase_seconds,
    })
}
