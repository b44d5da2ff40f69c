//! Finite-sample conformal quantiles.
//!
//! The calibration distribution puts mass `1/(n+1)` on each calibration score
//! and `1/(n+1)` on +∞; the `(1-α)` quantile of that distribution is the
//! band radius. The weighted variant reweights the score atoms by localizer
//! weights, keeping the ∞ atom at `1/(n+1)` so uniform weights reduce to the
//! unweighted construction.

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// Absolute slack on cumulative-mass comparisons.
///
/// The defining inequality is evaluated on cumulative masses that are exact
/// rationals in theory but rounded doubles in practice; without slack,
/// boundary ranks (e.g. α = 0.5 with odd n) flip on 1-ulp rounding and the
/// weighted/unweighted paths disagree. Atom masses are never smaller than
/// ~1e-5 in any supported configuration, so 1e-9 cannot change a non-boundary
/// decision.
const MASS_TOL: f64 = 1e-9;

/// The `(1-alpha)` quantile of a score distribution augmented with an ∞ atom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConformalQuantile {
    pub alpha: f64,
    /// Number of calibration scores.
    pub n: usize,
    /// Selected rank (1-based) among the sorted scores; `n + 1` means the
    /// ∞ atom was selected.
    pub rank: usize,
    /// The quantile itself; `f64::INFINITY` when the ∞ atom is selected.
    pub value: f64,
}

impl ConformalQuantile {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// Kernel weights localizing calibration scores around a query point.
#[derive(Debug, Clone)]
pub struct LocalizerWeights {
    pub raw: Vec<f64>,
    /// `raw` scaled to sum to 1.
    pub normalized: Vec<f64>,
}

impl LocalizerWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("weight vector".into()));
        }
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite(
                "localizer weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidConfig(
                "localizer weights must not all be zero".into(),
            ));
        }
        let normalized = raw.iter().map(|w| w / total).collect();
        Ok(Self { raw, normalized })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration score".into()));
    }
    Ok(())
}

fn sorted_copy(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("scores checked finite"));
    s
}

/// The `(1-alpha)` quantile of `{scores} ∪ {+∞}` with uniform atom masses.
///
/// Equals the k-th smallest score with `k = ⌈(1-alpha)(n+1)⌉`, or +∞ when
/// that rank exceeds `n`. Scores may be negative (the CQR-style scores are);
/// NaN or ±∞ scores are rejected.
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<ConformalQuantile> {
    check_alpha(alpha)?;
    check_scores(scores)?;
    let n = scores.len();
    let sorted = sorted_copy(scores);
    let atom = 1.0 / (n as f64 + 1.0);
    let mut cum = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cum += atom;
        if cum >= 1.0 - alpha - MASS_TOL {
            return Ok(ConformalQuantile {
                alpha,
                n,
                rank: i + 1,
                value: s,
            });
        }
    }
    Ok(ConformalQuantile {
        alpha,
        n,
        rank: n + 1,
        value: f64::INFINITY,
    })
}

/// Weighted conformal quantile: score atoms carry `normalized[i] · n/(n+1)`,
/// the ∞ atom `1/(n+1)`. Uniform weights reproduce [`conformal_quantile`].
pub fn weighted_conformal_quantile(
    scores: &[f64],
    weights: &LocalizerWeights,
    alpha: f64,
) -> Result<ConformalQuantile> {
    check_alpha(alpha)?;
    check_scores(scores)?;
    let n = scores.len();
    if weights.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} scores",
            weights.len(),
            n
        )));
    }
    let shrink = n as f64 / (n as f64 + 1.0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut cum = 0.0;
    for (i, &idx) in order.iter().enumerate() {
        cum += weights.normalized[idx] * shrink;
        if cum >= 1.0 - alpha - MASS_TOL {
            return Ok(ConformalQuantile {
                alpha,
                n,
                rank: i + 1,
                value: scores[idx],
            });
        }
    }
    Ok(ConformalQuantile {
        alpha,
        n,
        rank: n + 1,
        value: f64::INFINITY,
    })
}

/// Where localizer distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalizerSpace {
    /// Raw input vectors.
    Input,
    /// Feature vectors at the model's split.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Median pairwise distance among the calibration points.
    Auto,
    Fixed(f64),
}

/// Gaussian kernel weights `exp(-‖q - x_i‖² / (2h²))` against a calibration
/// matrix (one row per point). `Bandwidth::Auto` uses the median heuristic.
pub fn localizer_weights(
    query: &[f64],
    calibration: &RowMatrix,
    bandwidth: Bandwidth,
) -> Result<LocalizerWeights> {
    let h = resolve_bandwidth(calibration, bandwidth)?;
    let raw = (0..calibration.rows())
        .map(|i| {
            let d2 = squared_distance(query, calibration.row(i));
            (-d2 / (2.0 * h * h)).exp()
        })
        .collect();
    LocalizerWeights::new(raw)
}

/// The bandwidth [`localizer_weights`] will use, exposed so a harness can
/// compute it once per calibration set instead of per query.
pub fn resolve_bandwidth(calibration: &RowMatrix, bandwidth: Bandwidth) -> Result<f64> {
    if calibration.rows() == 0 {
        return Err(Error::Empty("calibration set".into()));
    }
    match bandwidth {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "bandwidth must be > 0, got {h}"
                )));
            }
            Ok(h)
        }
        Bandwidth::Auto => {
            let n = calibration.rows();
            if n == 1 {
                return Ok(1.0);
            }
            let mut dists = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    dists.push(squared_distance(calibration.row(i), calibration.row(j)).sqrt());
                }
            }
            let mid = dists.len() / 2;
            let (_, median, _) =
                dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite"));
            let median = *median;
            // Degenerate clouds (all points identical) fall back to 1.
            Ok(if median > 0.0 { median } else { 1.0 })
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search over candidate thresholds (every score and +∞) under
    /// the defining inequality. Independent of the rank-based implementation.
    pub(crate) fn brute_force_quantile(scores: &[f64], alpha: f64) -> f64 {
        let n = scores.len() as f64;
        let mut candidates = sorted_copy(scores);
        candidates.push(f64::INFINITY);
        for &t in &candidates {
            let count = scores.iter().filter(|&&s| s <= t).count() as f64;
            // +∞ always qualifies: total mass 1 ≥ 1-α.
            let mass = if t.is_infinite() {
                1.0
            } else {
                count / (n + 1.0)
            };
            if mass >= 1.0 - alpha - MASS_TOL {
                return t;
            }
        }
        unreachable!("+∞ candidate always qualifies")
    }

    #[test]
    fn empty_scores_give_infinity() {
        let q = conformal_quantile(&[], 0.1).unwrap();
        assert_eq!(q.value, f64::INFINITY);
        assert_eq!(q.rank, 1);
    }

    #[test]
    fn ten_scores_alpha_ten_percent() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let q = conformal_quantile(&scores, 0.1).unwrap();
        // k = ⌈0.9 · 11⌉ = 10.
        assert_eq!(q.value, 10.0);
        assert_eq!(q.rank, 10);
        assert_eq!(q.value, brute_force_quantile(&scores, 0.1));
    }

    #[test]
    fn ten_scores_alpha_five_percent_overflows() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let q = conformal_quantile(&scores, 0.05).unwrap();
        // k = ⌈0.95 · 11⌉ = 11 > 10, so the ∞ atom wins.
        assert_eq!(q.value, f64::INFINITY);
        assert_eq!(q.value, brute_force_quantile(&scores, 0.05));
    }

    #[test]
    fn rejects_nan_and_bad_alpha() {
        assert!(conformal_quantile(&[f64::NAN], 0.1).is_err());
        assert!(conformal_quantile(&[1.0], 0.0).is_err());
        assert!(conformal_quantile(&[1.0], 1.0).is_err());
    }

    #[test]
    fn weighted_hand_example() {
        // d̃ = (0.1875, 0.1875, 0.375); cumulative at score 3 is 0.75 ≥ 0.75.
        let weights = LocalizerWeights::new(vec![1.0, 1.0, 2.0]).unwrap();
        let q = weighted_conformal_quantile(&[1.0, 2.0, 3.0], &weights, 0.25).unwrap();
        assert_eq!(q.value, 3.0);
    }

    #[test]
    fn weighted_alpha_near_zero_is_infinite() {
        let weights = LocalizerWeights::new(vec![1.0, 1.0, 1.0]).unwrap();
        let q = weighted_conformal_quantile(&[1.0, 2.0, 3.0], &weights, 1e-9).unwrap();
        assert_eq!(q.value, f64::INFINITY);
    }

    #[test]
    fn weighted_rejects_bad_weights() {
        assert!(LocalizerWeights::new(vec![1.0, -0.5]).is_err());
        assert!(LocalizerWeights::new(vec![0.0, 0.0]).is_err());
        assert!(LocalizerWeights::new(vec![]).is_err());
    }

    #[test]
    fn uniform_weights_reduce_to_unweighted() {
        // Includes the boundary ranks that round badly in naive float code:
        // (1-α)(n+1) integral for α=0.5/odd n, α=0.25/n∈{3,7,11}, α=0.1/n=9.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let n = rng.gen_range(1..=12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for alpha in [0.05, 0.1, 0.25, 0.5] {
                let unweighted = conformal_quantile(&scores, alpha).unwrap();
                let weights = LocalizerWeights::uniform(n).unwrap();
                let weighted = weighted_conformal_quantile(&scores, &weights, alpha).unwrap();
                assert_eq!(
                    unweighted.value, weighted.value,
                    "n={n} alpha={alpha} scores={scores:?}"
                );
            }
        }
    }

    #[test]
    fn monotone_in_alpha() {
        let scores = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let mut last = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
            let q = conformal_quantile(&scores, alpha).unwrap().value;
            assert!(q <= last, "quantile must not grow as alpha grows");
            last = q;
        }
    }

    #[test]
    fn permutation_invariant() {
        let a = [5.0, 2.0, 8.0, 1.0];
        let b = [1.0, 8.0, 2.0, 5.0];
        for alpha in [0.1, 0.3, 0.6] {
            assert_eq!(
                conformal_quantile(&a, alpha).unwrap().value,
                conformal_quantile(&b, alpha).unwrap().value
            );
        }
    }

    #[test]
    fn kernel_hand_values() {
        // Distances (0, 1, 2), bandwidth 1 → raw = (1, e^{-0.5}, e^{-2}).
        let cal = RowMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let w = localizer_weights(&[0.0], &cal, Bandwidth::Fixed(1.0)).unwrap();
        assert!((w.raw[0] - 1.0).abs() < 1e-15);
        assert!((w.raw[1] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((w.raw[2] - (-2.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_concentrates_on_matching_point() {
        let cal = RowMatrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![-4.0, 3.0]]).unwrap();
        let w = localizer_weights(&[0.0, 0.0], &cal, Bandwidth::Fixed(1e-3)).unwrap();
        assert!(w.normalized[0] > 0.999999);
    }

    #[test]
    fn equidistant_points_get_uniform_weights() {
        let cal = RowMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = localizer_weights(&[0.0, 0.0], &cal, Bandwidth::Auto).unwrap();
        assert_eq!(w.normalized[0], w.normalized[1]);
        assert_eq!(w.normalized[1], w.normalized[2]);
    }

    #[test]
    fn empty_calibration_rejected() {
        let cal = RowMatrix::zeros(0, 2);
        assert!(localizer_weights(&[0.0, 0.0], &cal, Bandwidth::Auto).is_err());
    }

    #[test]
    fn oracle_equivalence_small_multisets() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let n = rng.gen_range(0..=12);
            // Small integer-valued scores make ties common.
            let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6))).collect();
            for alpha in [0.05, 0.1, 0.25, 0.5] {
                let q = conformal_quantile(&scores, alpha).unwrap().value;
                let oracle = brute_force_quantile(&scores, alpha);
                assert_eq!(q, oracle, "n={n} alpha={alpha} scores={scores:?}");
            }
        }
    }
}
