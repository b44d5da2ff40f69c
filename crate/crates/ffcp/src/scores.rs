//! Non-conformity scores.
//!
//! - vanilla: coordinate-wise absolute residual `|y - ŷ|`
//! - ffcp: residual divided by the head-gradient row norm `‖∇g(v̂)‖`
//! - cqr / ffcqr: signed quantile-regression scores, optionally gradient
//!   normalized
//! - fcp: distance from `v̂` to the nearest feature `v` with `g(v) = y`,
//!   found by gradient descent (an upper bound on the true infimum)

use crate::error::{Error, Result};
use crate::matrix::RowMatrix;
use crate::nnkit::MlpModel;

/// Floor applied to gradient norms before dividing. Dead-ReLU features can
/// zero a whole Jacobian row; the floor keeps scores finite and the number of
/// floor activations is surfaced in reports.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Conformal method tag carried by score sets and bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Ffcp,
    Cqr,
    Ffcqr,
    Fcp,
    Lcp,
    Fflcp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Ffcp => "ffcp",
            Method::Cqr => "cqr",
            Method::Ffcqr => "ffcqr",
            Method::Fcp => "fcp",
            Method::Lcp => "lcp",
            Method::Fflcp => "fflcp",
        }
    }

    /// True when the method divides residuals by a gradient norm.
    pub fn normalizes_by_gradient(self) -> bool {
        matches!(self, Method::Ffcp | Method::Ffcqr | Method::Fflcp)
    }
}

/// Per-sample scores for one method over one fold.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub method: Method,
    /// `n × d_y` scores.
    pub scores: RowMatrix,
    /// Present iff the method normalizes by a gradient.
    pub grad_norms: Option<RowMatrix>,
    pub split_index: usize,
    /// Number of times the gradient-norm floor kicked in.
    pub floor_hits: usize,
}

impl ScoreSet {
    /// Validating constructor: scores must be finite (and non-negative for
    /// the residual-based methods; CQR-style scores are signed), and
    /// gradient norms must be present exactly when the method divides by
    /// them.
    pub fn new(
        method: Method,
        scores: RowMatrix,
        grad_norms: Option<RowMatrix>,
        split_index: usize,
        floor_hits: usize,
    ) -> Result<Self> {
        if scores.as_slice().iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score set entry".into()));
        }
        let signed_ok = matches!(method, Method::Cqr | Method::Ffcqr);
        if !signed_ok && scores.as_slice().iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "{} scores must be non-negative",
                method.name()
            )));
        }
        if method.normalizes_by_gradient() != grad_norms.is_some() {
            return Err(Error::InvalidConfig(format!(
                "{} {} gradient norms",
                method.name(),
                if method.normalizes_by_gradient() {
                    "requires"
                } else {
                    "does not carry"
                }
            )));
        }
        Ok(Self {
            method,
            scores,
            grad_norms,
            split_index,
            floor_hits,
        })
    }

    /// Column `j` of the score matrix.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.scores.column(j)
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(name.into()));
    }
    Ok(())
}

/// `|y - ŷ|` per coordinate.
pub fn score_vanilla(y: &[f64], yhat: &[f64]) -> Result<Vec<f64>> {
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch(format!(
            "y has {} coordinates, prediction {}",
            y.len(),
            yhat.len()
        )));
    }
    check_finite("score_vanilla input", y)?;
    check_finite("score_vanilla prediction", yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).collect())
}

/// `|y - ŷ| / max(‖∇g(v̂)‖, floor)` per coordinate. Also reports how many
/// coordinates hit the floor.
pub fn score_ffcp(y: &[f64], yhat: &[f64], grad_norms: &[f64]) -> Result<(Vec<f64>, usize)> {
    let residuals = score_vanilla(y, yhat)?;
    if grad_norms.len() != residuals.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradient norms for {} outputs",
            grad_norms.len(),
            residuals.len()
        )));
    }
    check_finite("score_ffcp gradient norms", grad_norms)?;
    let mut floor_hits = 0;
    let scores = residuals
        .iter()
        .zip(grad_norms)
        .map(|(r, g)| {
            let denom = if *g < GRAD_NORM_FLOOR {
                floor_hits += 1;
                GRAD_NORM_FLOOR
            } else {
                *g
            };
            r / denom
        })
        .collect();
    Ok((scores, floor_hits))
}

/// CQR score `max(lo - y, y - hi)`. Negative when `y` lies strictly inside
/// the quantile interval; the quantile engine is sign-agnostic.
pub fn score_cqr(y: f64, lo: f64, hi: f64) -> Result<f64> {
    check_finite("score_cqr input", &[y, lo, hi])?;
    Ok((lo - y).max(y - hi))
}

/// Gradient-normalized CQR score `max((lo-y)/‖∇g_lo‖, (y-hi)/‖∇g_hi‖)`.
pub fn score_ffcqr(
    y: f64,
    lo: f64,
    hi: f64,
    gnorm_lo: f64,
    gnorm_hi: f64,
) -> Result<(f64, usize)> {
    check_finite("score_ffcqr input", &[y, lo, hi, gnorm_lo, gnorm_hi])?;
    let mut floor_hits = 0;
    let mut floored = |g: f64| {
        if g < GRAD_NORM_FLOOR {
            floor_hits += 1;
            GRAD_NORM_FLOOR
        } else {
            g
        }
    };
    let a = (lo - y) / floored(gnorm_lo);
    let b = (y - hi) / floored(gnorm_hi);
    Ok((a.max(b), floor_hits))
}

/// Gradient-descent search for the FCP surrogate feature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FcpSearchConfig {
    pub max_iters: usize,
    pub step_size: f64,
    /// Search stops when `|g(v) - y| <= residual_tol_scale * (1 + |y|)`.
    pub residual_tol_scale: f64,
    /// Number of descent starts; the first is always the warm start at `v̂`.
    pub restarts: usize,
}

impl Default for FcpSearchConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            step_size: 1e-2,
            residual_tol_scale: 1e-4,
            restarts: 1,
        }
    }
}

impl FcpSearchConfig {
    fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !(self.residual_tol_scale > 0.0) {
            return Err(Error::InvalidConfig(
                "step_size and residual_tol_scale must be > 0".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of one FCP surrogate-feature search.
#[derive(Debug, Clone)]
pub struct FcpScore {
    /// `‖v* - v̂‖`, an upper bound on the true feature-space infimum.
    pub score: f64,
    pub surrogate: Vec<f64>,
    /// `|g(v*) - y|` at the returned point. Non-convergence is reported
    /// here, not as an error.
    pub residual: f64,
}

/// Find (approximately) the nearest feature `v` with `g(v) = y` and return
/// its distance from `v̂ = h(x)`.
///
/// Descends `L(v) = (g(v) - y)²` from the warm start `v̂` with backtracking
/// steps; optional extra restarts perturb the start deterministically.
pub fn score_fcp(
    model: &MlpModel,
    x: &[f64],
    y: f64,
    config: &FcpSearchConfig,
) -> Result<FcpScore> {
    if model.output_dim() != 1 {
        return Err(Error::InvalidConfig(
            "fcp baseline requires a scalar output head".into(),
        ));
    }
    check_finite("score_fcp target", &[y])?;
    config.validate()?;
    let v_hat = model.forward(x)?.feature;
    score_fcp_at_feature(model, &v_hat, y, config)
}

/// Same search, starting from an already-computed feature vector.
pub fn score_fcp_at_feature(
    model: &MlpModel,
    v_hat: &[f64],
    y: f64,
    config: &FcpSearchConfig,
) -> Result<FcpScore> {
    let tol = config.residual_tol_scale * (1.0 + y.abs());
    let mut best: Option<FcpScore> = None;
    for restart in 0..config.restarts {
        let mut v = v_hat.to_vec();
        if restart > 0 {
            // Deterministic perturbation; cheaper than threading an RNG here
            // and good enough to escape the odd flat region.
            let scale = 0.1 * restart as f64;
            for (k, vk) in v.iter_mut().enumerate() {
                *vk += scale * ((k as f64 + 1.0) * 0.7391).sin();
            }
        }
        let candidate = descend(model, v_hat, v, y, tol, config)?;
        let better = match &best {
            None => true,
            Some(b) => {
                // Prefer feasible points; among feasible, shortest distance.
                let cand_ok = candidate.residual <= tol;
                let best_ok = b.residual <= tol;
                match (cand_ok, best_ok) {
                    (true, false) => true,
                    (false, true) => false,
                    _ => candidate.score < b.score,
                }
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

fn descend(
    model: &MlpModel,
    v_hat: &[f64],
    mut v: Vec<f64>,
    y: f64,
    tol: f64,
    config: &FcpSearchConfig,
) -> Result<FcpScore> {
    let mut residual = model.head_forward(&v)?[0] - y;
    let mut step = config.step_size;
    for _ in 0..config.max_iters {
        if residual.abs() <= tol {
            break;
        }
        // ∇L = 2(g(v) - y)·∇g(v); rows has a single row for scalar heads.
        let jac = model.head_jacobian_at(&v)?;
        let grad: Vec<f64> = jac.rows.iter().map(|d| 2.0 * residual * d).collect();
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        if grad_sq == 0.0 {
            // Flat spot (dead head); nothing more to do from here.
            break;
        }
        // Backtracking: shrink until the squared residual decreases.
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = v.iter().zip(&grad).map(|(vk, g)| vk - step * g).collect();
            let trial_residual = model.head_forward(&trial)?[0] - y;
            if trial_residual * trial_residual < residual * residual {
                v = trial;
                residual = trial_residual;
                accepted = true;
                // Gentle growth so a conservative step can recover.
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    // Polish: one linearized projection onto {g(v) = y} per pass. This is
    // exact for affine heads, where the descent loop otherwise stops at the
    // residual tolerance with a score error of tol/‖∇g‖.
    for _ in 0..2 {
        if residual == 0.0 {
            break;
        }
        let jac = model.head_jacobian_at(&v)?;
        let grad_sq: f64 = jac.rows.iter().map(|g| g * g).sum();
        if grad_sq == 0.0 {
            break;
        }
        let trial: Vec<f64> = v
            .iter()
            .zip(&jac.rows)
            .map(|(vk, g)| vk - residual * g / grad_sq)
            .collect();
        let trial_residual = model.head_forward(&trial)?[0] - y;
        if trial_residual.abs() < residual.abs() {
            v = trial;
            residual = trial_residual;
        } else {
            break;
        }
    }
    let score = v
        .iter()
        .zip(v_hat)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(FcpScore {
        score,
        surrogate: v,
        residual: residual.abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{mlp_init, Activation, MlpModel, OutputKind};

    fn linear_head(w: &[f64], b: f64) -> MlpModel {
        let mut m = mlp_init(
            &[w.len(), 1],
            &[Activation::Identity],
            0,
            OutputKind::Regression { dim: 1 },
            0,
        )
        .unwrap();
        m.set_layer_params(0, w, &[b]);
        m
    }

    #[test]
    fn vanilla_examples() {
        assert_eq!(score_vanilla(&[3.0], &[3.0]).unwrap(), vec![0.0]);
        assert_eq!(score_vanilla(&[3.0], &[7.0]).unwrap(), vec![4.0]);
        assert_eq!(
            score_vanilla(&[1.0, 2.0], &[0.0, 5.0]).unwrap(),
            vec![1.0, 3.0]
        );
        assert!(score_vanilla(&[f64::NAN], &[0.0]).is_err());
    }

    #[test]
    fn ffcp_examples() {
        let (s, hits) = score_ffcp(&[1.0, 2.0], &[0.0, 5.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s, vec![1.0, 3.0]);
        assert_eq!(hits, 0);

        let (s, _) = score_ffcp(&[12.0], &[7.0], &[5.0]).unwrap();
        assert_eq!(s, vec![1.0]);

        let (s, hits) = score_ffcp(&[3.0], &[3.0], &[0.0]).unwrap();
        assert_eq!(s, vec![0.0]);
        assert_eq!(hits, 1);
        assert!(s[0].is_finite());
    }

    #[test]
    fn cqr_examples() {
        // Inside the interval the score is negative, by design.
        assert_eq!(score_cqr(5.0, 4.0, 6.0).unwrap(), -1.0);
        assert_eq!(score_cqr(9.0, 7.0, 7.0).unwrap(), 2.0);
        assert_eq!(score_cqr(6.0, 4.0, 6.0).unwrap(), 0.0);
    }

    #[test]
    fn ffcqr_examples() {
        let (s, _) = score_ffcqr(8.0, 4.0, 6.0, 1.0, 2.0).unwrap();
        assert_eq!(s, 1.0);
        // Unit gradients reduce to plain CQR.
        let (s, _) = score_ffcqr(5.0, 4.0, 6.0, 1.0, 1.0).unwrap();
        assert_eq!(s, score_cqr(5.0, 4.0, 6.0).unwrap());
        // Midpoint with symmetric interval and equal norms: branches negate.
        let y = 5.0;
        let (a, b) = ((4.0 - y) / 2.0, (y - 6.0) / 2.0);
        assert_eq!(a, b);
    }

    #[test]
    fn fcp_already_feasible() {
        let m = linear_head(&[3.0, 4.0], 0.0);
        let y = m.predict(&[1.0, 1.0]).unwrap()[0];
        let r = score_fcp(&m, &[1.0, 1.0], y, &FcpSearchConfig::default()).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.residual, 0.0);
    }

    #[test]
    fn fcp_linear_head_matches_projection() {
        // Analytic minimum distance |y - w·v̂| / ‖w‖ = 5/5 = 1.
        let m = linear_head(&[3.0, 4.0], 0.0);
        let r = score_fcp(&m, &[1.0, 1.0], 12.0, &FcpSearchConfig::default()).unwrap();
        assert!(
            (r.score - 1.0).abs() < 1e-4,
            "score {} should be 1 ± 1e-4",
            r.score
        );
    }

    #[test]
    fn fcp_relu_head_matches_grid_search() {
        // g(v) = 2·relu(v); v̂ = 1 (g = 2), y = 4 → nearest root at v = 2.
        let mut m = mlp_init(
            &[1, 1, 1],
            &[Activation::Relu, Activation::Identity],
            0,
            OutputKind::Regression { dim: 1 },
            0,
        )
        .unwrap();
        m.set_layer_params(0, &[1.0], &[0.0]);
        m.set_layer_params(1, &[2.0], &[0.0]);

        let r = score_fcp(&m, &[1.0], 4.0, &FcpSearchConfig::default()).unwrap();

        // Independent grid-search oracle over v ∈ [-5, 5].
        let mut best = f64::INFINITY;
        let mut v: f64 = -5.0;
        while v <= 5.0 {
            let g = 2.0 * v.max(0.0);
            if (g - 4.0).abs() <= 1e-3 {
                best = best.min((v - 1.0f64).abs());
            }
            v += 1e-4;
        }
        assert!((r.score - best).abs() < 1e-3, "score {} vs grid {best}", r.score);
        assert!((r.score - 1.0).abs() < 1e-3);
    }

    #[test]
    fn fcp_linear_equivalence_with_ffcp() {
        // For affine heads the Taylor expansion is exact, so the FCP search
        // must land on the FFCP score.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let d = rng.gen_range(2..8);
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if w.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.3 {
                continue;
            }
            let b = rng.gen_range(-1.0..1.0);
            let m = linear_head(&w, b);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = rng.gen_range(-3.0..3.0);

            let view = m.forward(&x).unwrap();
            let jac = m.head_jacobian(&x).unwrap();
            let (ffcp, _) =
                score_ffcp(&[y], &view.prediction, &jac.row_norms).unwrap();
            let fcp = score_fcp(&m, &x, y, &FcpSearchConfig::default()).unwrap();
            assert!(
                (fcp.score - ffcp[0]).abs() < 1e-4,
                "fcp {} vs ffcp {} (w={w:?})",
                fcp.score,
                ffcp[0]
            );
        }
    }

    #[test]
    fn ffcp_scale_equivariance() {
        // Scaling the final affine layer and the labels by c leaves the
        // score unchanged: residual and gradient norm both scale by c.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let m = MlpModel::with_relu_hidden(
                &[4, 6, 1],
                1,
                OutputKind::Regression { dim: 1 },
                rng.gen(),
            )
            .unwrap();
            let c = rng.gen_range(0.5..4.0);
            let scaled = m.with_scaled_final_layer(c);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = rng.gen_range(-2.0..2.0);

            let s1 = {
                let view = m.forward(&x).unwrap();
                let jac = m.head_jacobian(&x).unwrap();
                score_ffcp(&[y], &view.prediction, &jac.row_norms).unwrap().0[0]
            };
            let s2 = {
                let view = scaled.forward(&x).unwrap();
                let jac = scaled.head_jacobian(&x).unwrap();
                score_ffcp(&[c * y], &view.prediction, &jac.row_norms)
                    .unwrap()
                    .0[0]
            };
            assert!(
                (s1 - s2).abs() <= 1e-9 * (1.0 + s1.abs()),
                "scores {s1} vs {s2} under scaling {c}"
            );
        }
    }
}
