//! Regularized adaptive prediction sets for classification, with the
//! gradient-augmented variant (FFRAPS).
//!
//! Calibration computes per-sample conformity scores
//! `E_i = Σ_{j≤L_i} s_{i,j} + δ·‖∇g(v̂_i)‖ + λ(L_i - k_reg)⁺` where `s` is the
//! descending-sorted softmax vector and `L_i` the rank of the true label; the
//! threshold `τ̂` is the conformal `(1-α)` quantile of the `E_i`. Prediction
//! includes classes until the same running statistic passes `τ̂`. Setting
//! `δ = 0` removes the gradient term and recovers plain RAPS exactly.

use crate::calib::conformal_quantile;
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// Which scalar stands in for `‖∇g(v̂)‖` on a multi-output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNormMode {
    /// Euclidean norm of the top-1 logit's gradient row.
    #[default]
    TopLogit,
    /// Frobenius norm of the full head Jacobian.
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RapsConfig {
    pub alpha: f64,
    /// Size-penalty weight λ ≥ 0.
    pub lambda: f64,
    /// Penalty-free set size k_reg ≥ 0.
    pub k_reg: usize,
    /// Gradient-term weight δ ≥ 0; zero disables the term (plain RAPS).
    pub delta: f64,
    pub grad_norm_mode: GradNormMode,
    /// Take τ̂ as the ⌈(1-α)(n+1)⌉-th *largest* conformity score instead of
    /// the k-th smallest. This literal reading inverts the quantile and
    /// destroys coverage; it exists only for comparison.
    pub literal_largest_rank: bool,
}

impl Default for RapsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            lambda: 0.01,
            k_reg: 5,
            delta: 0.0,
            grad_norm_mode: GradNormMode::TopLogit,
            literal_largest_rank: false,
        }
    }
}

impl RapsConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.lambda >= 0.0) || !(self.delta >= 0.0) {
            return Err(Error::InvalidConfig(
                "lambda and delta must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Classes included for one test point, most probable first.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Class indices in descending-probability order.
    pub classes: Vec<usize>,
    pub tau_hat: f64,
}

impl PredictionSet {
    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.classes.contains(&label)
    }
}

/// Numerically stable softmax followed by a descending sort.
///
/// Returns the sorted probabilities and the permutation: `permutation[r]` is
/// the class whose probability has rank `r`. Ties keep ascending class order.
pub fn softmax_sorted(logits: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if logits.is_empty() {
        return Err(Error::Empty("logit vector".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let mut permutation: Vec<usize> = (0..logits.len()).collect();
    // Stable sort on descending probability keeps tied classes in index order.
    permutation.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).expect("finite"));
    let sorted = permutation.iter().map(|&k| probs[k]).collect();
    Ok((sorted, permutation))
}

fn conformity_statistic(
    sorted_probs: &[f64],
    rank: usize,
    grad_norm: f64,
    config: &RapsConfig,
) -> f64 {
    let cumulative: f64 = sorted_probs[..rank].iter().sum();
    let penalty = config.lambda * (rank as f64 - config.k_reg as f64).max(0.0);
    cumulative + config.delta * grad_norm + penalty
}

/// Calibrate the inclusion threshold τ̂.
///
/// `grad_norms` supplies `‖∇g(v̂_i)‖` per calibration point; pass all-ones
/// (or anything) when `delta = 0`. Returns +∞ when the conformal rank
/// exceeds the calibration count.
pub fn raps_calibrate(
    cal_logits: &RowMatrix,
    cal_labels: &[usize],
    grad_norms: &[f64],
    config: &RapsConfig,
) -> Result<f64> {
    config.validate()?;
    let n = cal_logits.rows();
    if n == 0 {
        return Err(Error::Empty("calibration fold".into()));
    }
    if cal_labels.len() != n || grad_norms.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows vs {} labels vs {} gradient norms",
            n,
            cal_labels.len(),
            grad_norms.len()
        )));
    }
    let classes = cal_logits.cols();
    let mut conformity = Vec::with_capacity(n);
    for i in 0..n {
        let label = cal_labels[i];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let (sorted, permutation) = softmax_sorted(cal_logits.row(i))?;
        let rank = permutation
            .iter()
            .position(|&k| k == label)
            .expect("label in permutation")
            + 1;
        conformity.push(conformity_statistic(&sorted, rank, grad_norms[i], config));
    }

    if config.literal_largest_rank {
        // k-th largest = (n+1-k)-th smallest; +∞ when k > n as usual.
        let q = conformal_quantile(&conformity, config.alpha)?;
        if q.rank > n {
            return Ok(f64::INFINITY);
        }
        let mut sorted = conformity;
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        return Ok(sorted[n - q.rank]);
    }

    Ok(conformal_quantile(&conformity, config.alpha)?.value)
}

/// Build the prediction set for one test point.
///
/// `L` is the number of leading classes whose running statistic stays within
/// τ̂, plus one, clamped to the class count; the set is the first `L`
/// classes of the descending sort.
pub fn raps_predict(
    logits: &[f64],
    grad_norm: f64,
    tau_hat: f64,
    config: &RapsConfig,
) -> Result<PredictionSet> {
    config.validate()?;
    let (sorted, permutation) = softmax_sorted(logits)?;
    let k = sorted.len();
    if tau_hat.is_infinite() && tau_hat > 0.0 {
        return Ok(PredictionSet {
            classes: permutation,
            tau_hat,
        });
    }
    let mut qualifying = 0;
    for j in 1..=k {
        if conformity_statistic(&sorted, j, grad_norm, config) <= tau_hat {
            qualifying = j;
        } else {
            break;
        }
    }
    let size = (qualifying + 1).min(k);
    Ok(PredictionSet {
        classes: permutation[..size].to_vec(),
        tau_hat,
    })
}
