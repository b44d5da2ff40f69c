//! Prediction bands for the regression methods.

use crate::calib::ConformalQuantile;
use crate::error::{Error, Result};
use crate::scores::Method;

/// A per-coordinate closed interval around a center prediction.
///
/// An infinite quantile produces explicit ±∞ endpoints; those bands cover
/// everything and are excluded (but counted) by the length metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub center: Vec<f64>,
    pub method: Method,
}

impl PredictionBand {
    /// Closed-interval membership per coordinate.
    pub fn contains_each(&self, y: &[f64]) -> Result<Vec<bool>> {
        if y.len() != self.lower.len() {
            return Err(Error::DimensionMismatch(format!(
                "y has {} coordinates, band has {}",
                y.len(),
                self.lower.len()
            )));
        }
        Ok(y.iter()
            .enumerate()
            .map(|(j, &v)| self.lower[j] <= v && v <= self.upper[j])
            .collect())
    }

    /// All-coordinates conjunction of [`Self::contains_each`].
    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        Ok(self.contains_each(y)?.iter().all(|&b| b))
    }

    /// True when any endpoint is infinite.
    pub fn is_infinite(&self) -> bool {
        self.lower.iter().any(|v| v.is_infinite()) || self.upper.iter().any(|v| v.is_infinite())
    }

    /// Coordinate-averaged width `(1/d) Σ_j (upper_j - lower_j)`.
    pub fn mean_width(&self) -> f64 {
        let d = self.lower.len() as f64;
        self.upper
            .iter()
            .zip(&self.lower)
            .map(|(u, l)| u - l)
            .sum::<f64>()
            / d
    }
}

fn symmetric_band(yhat: &[f64], halfwidths: &[f64], method: Method) -> PredictionBand {
    let lower = yhat.iter().zip(halfwidths).map(|(c, h)| c - h).collect();
    let upper = yhat.iter().zip(halfwidths).map(|(c, h)| c + h).collect();
    PredictionBand {
        lower,
        upper,
        center: yhat.to_vec(),
        method,
    }
}

/// `[ŷ - Q, ŷ + Q]` per coordinate.
pub fn band_vanilla(yhat: &[f64], q: &ConformalQuantile) -> PredictionBand {
    if !q.is_finite() {
        return infinite_band(yhat, Method::Vanilla);
    }
    let halfwidths = vec![q.value; yhat.len()];
    symmetric_band(yhat, &halfwidths, Method::Vanilla)
}

/// `[ŷ_j - ‖∇g(v̂)_j‖·Q, ŷ_j + ‖∇g(v̂)_j‖·Q]` per coordinate.
pub fn band_ffcp(yhat: &[f64], grad_norms: &[f64], q: &ConformalQuantile) -> PredictionBand {
    band_gradient_scaled(yhat, grad_norms, q, Method::Ffcp)
}

/// As [`band_ffcp`] with a per-test-point weighted quantile.
pub fn band_fflcp(yhat: &[f64], grad_norms: &[f64], q_local: &ConformalQuantile) -> PredictionBand {
    band_gradient_scaled(yhat, grad_norms, q_local, Method::Fflcp)
}

fn band_gradient_scaled(
    yhat: &[f64],
    grad_norms: &[f64],
    q: &ConformalQuantile,
    method: Method,
) -> PredictionBand {
    if !q.is_finite() {
        return infinite_band(yhat, method);
    }
    let halfwidths: Vec<f64> = grad_norms.iter().map(|g| g * q.value).collect();
    symmetric_band(yhat, &halfwidths, method)
}

/// `[lo - ‖∇g_lo‖·Q, hi + ‖∇g_hi‖·Q]` for a scalar response.
///
/// A strongly negative quantile can push the endpoints past each other; such
/// empty intervals collapse to their midpoint, which covers the same (measure
/// zero) event while keeping `lower <= upper`.
pub fn band_ffcqr(
    lo: f64,
    hi: f64,
    gnorm_lo: f64,
    gnorm_hi: f64,
    q: &ConformalQuantile,
    method: Method,
) -> PredictionBand {
    let center = vec![0.5 * (lo + hi)];
    if !q.is_finite() {
        return PredictionBand {
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            center,
            method,
        };
    }
    let mut lower = lo - gnorm_lo * q.value;
    let mut upper = hi + gnorm_hi * q.value;
    if lower > upper {
        let mid = 0.5 * (lower + upper);
        lower = mid;
        upper = mid;
    }
    PredictionBand {
        lower: vec![lower],
        upper: vec![upper],
        center,
        method,
    }
}

fn infinite_band(yhat: &[f64], method: Method) -> PredictionBand {
    PredictionBand {
        lower: vec![f64::NEG_INFINITY; yhat.len()],
        upper: vec![f64::INFINITY; yhat.len()],
        center: yhat.to_vec(),
        method,
    }
}
