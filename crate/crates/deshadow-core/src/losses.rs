//! The four training losses and their weighted combination.
//!
//! Matting loss pins the matte to 1 in the umbra and 0 outside the dilated
//! mask; smoothness loss is an L1 penalty on matte gradients; boundary loss
//! matches mean output intensity across the shadow boundary rings; the
//! adversarial term comes from the critic score. Region sums are normalized
//! to means so the weights stay independent of patch size and region
//! cardinality. Each loss also has a `*_grad` twin returning the analytic
//! gradient, checked against central finite differences in the tests.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::mask::RegionMasks;
use crate::physics::MatteLayer;
use crate::scalar::Scalar;

/// Scores are clamped into `[EPS, 1−EPS]` before any logarithm.
pub const SCORE_CLAMP: f64 = 1e-7;

/// Weights of the combined generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sm: f64,
    pub lambda_mat: f64,
    pub lambda_bd: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sm: 10.0,
            lambda_mat: 100.0,
            lambda_bd: 0.5,
            lambda_adv: 0.5,
        }
    }
}

/// Which generator adversarial objective to minimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanLossMode {
    /// −log D(out): the usual stability fix, same gradient direction.
    NonSaturating,
    /// log(1 − D(out)): the minimax form, selectable for ablations.
    Minimax,
}

/// The four component values entering the weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossParts<S: Scalar> {
    pub l_sm: S,
    pub l_mat: S,
    pub l_bd: S,
    pub l_adv: S,
}

fn check_alpha_dims<S: Scalar>(alpha: &MatteLayer<S>, regions: &RegionMasks) -> Result<()> {
    if alpha.height() != regions.umbra.height() || alpha.width() != regions.umbra.width() {
        return Err(Error::DimensionMismatch(format!(
            "matte {}x{} vs regions {}x{}",
            alpha.height(),
            alpha.width(),
            regions.umbra.height(),
            regions.umbra.width()
        )));
    }
    Ok(())
}

/// Mean |α−1| over the umbra plus mean |α| over the non-shadow region;
/// an empty region contributes 0.
pub fn matting_loss<S: Scalar>(alpha: &MatteLayer<S>, regions: &RegionMasks) -> Result<S> {
    Ok(matting_loss_grad(alpha, regions)?.0)
}

/// [`matting_loss`] together with ∂L/∂α.
pub fn matting_loss_grad<S: Scalar>(
    alpha: &MatteLayer<S>,
    regions: &RegionMasks,
) -> Result<(S, Array2<S>)> {
    check_alpha_dims(alpha, regions)?;
    let a = alpha.alpha();
    let (h, w) = a.dim();
    let n_umbra = regions.umbra.count_ones();
    let n_nonshadow = regions.nonshadow.count_ones();
    let mut grad = Array2::zeros((h, w));
    let mut loss = S::zero();
    for r in 0..h {
        for c in 0..w {
            if n_umbra > 0 && regions.umbra.get(r, c) {
                let inv = S::c(1.0 / n_umbra as f64);
                let d = a[(r, c)] - S::one();
                loss += d.abs() * inv;
                grad[(r, c)] += signum_or_zero(d) * inv;
            }
            if n_nonshadow > 0 && regions.nonshadow.get(r, c) {
                let inv = S::c(1.0 / n_nonshadow as f64);
                let d = a[(r, c)];
                loss += d.abs() * inv;
                grad[(r, c)] += signum_or_zero(d) * inv;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean |forward difference| of the matte along x plus the same along y.
pub fn smoothness_loss<S: Scalar>(alpha: &MatteLayer<S>) -> Result<S> {
    Ok(smoothness_loss_grad(alpha)?.0)
}

/// [`smoothness_loss`] together with ∂L/∂α.
pub fn smoothness_loss_grad<S: Scalar>(alpha: &MatteLayer<S>) -> Result<(S, Array2<S>)> {
    let a = alpha.alpha();
    let (h, w) = a.dim();
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothness loss needs a matte of at least 2x2, got {h}x{w}"
        )));
    }
    let mut grad = Array2::zeros((h, w));
    let inv_x = S::c(1.0 / (h * (w - 1)) as f64);
    let inv_y = S::c(1.0 / ((h - 1) * w) as f64);
    let mut loss = S::zero();
    for r in 0..h {
        for c in 0..w - 1 {
            let d = a[(r, c + 1)] - a[(r, c)];
            loss += d.abs() * inv_x;
            let s = signum_or_zero(d) * inv_x;
            grad[(r, c + 1)] += s;
            grad[(r, c)] -= s;
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            let d = a[(r + 1, c)] - a[(r, c)];
            loss += d.abs() * inv_y;
            let s = signum_or_zero(d) * inv_y;
            grad[(r + 1, c)] += s;
            grad[(r, c)] -= s;
        }
    }
    Ok((loss, grad))
}

/// Boundary loss value plus a flag for patches without a usable boundary.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryLoss<S: Scalar> {
    pub value: S,
    /// False when `m_in` or `m_out` was empty and the loss defaulted to 0.
    pub usable: bool,
}

/// |mean(output over m_in) − mean(output over m_out)|, means taken jointly
/// over all three channels. Empty rings yield 0 with `usable = false`.
pub fn boundary_loss<S: Scalar>(output: &RasterImage<S>, regions: &RegionMasks) -> BoundaryLoss<S> {
    boundary_loss_grad(output, regions).0
}

/// [`boundary_loss`] together with ∂L/∂output.
pub fn boundary_loss_grad<S: Scalar>(
    output: &RasterImage<S>,
    regions: &RegionMasks,
) -> (BoundaryLoss<S>, Array3<S>) {
    let (h, w, _) = output.pixels().dim();
    let mut grad = Array3::zeros((h, w, 3));
    if !regions.has_boundary() {
        return (
            BoundaryLoss {
                value: S::zero(),
                usable: false,
            },
            grad,
        );
    }
    let n_in = regions.m_in.count_ones();
    let n_out = regions.m_out.count_ones();
    let mut sum_in = S::zero();
    let mut sum_out = S::zero();
    for r in 0..h {
        for c in 0..w {
            if regions.m_in.get(r, c) {
                for k in 0..3 {
                    sum_in += output.pixels()[(r, c, k)];
                }
            }
            if regions.m_out.get(r, c) {
                for k in 0..3 {
                    sum_out += output.pixels()[(r, c, k)];
                }
            }
        }
    }
    let inv_in = S::c(1.0 / (3 * n_in) as f64);
    let inv_out = S::c(1.0 / (3 * n_out) as f64);
    let diff = sum_in * inv_in - sum_out * inv_out;
    let sign = signum_or_zero(diff);
    for r in 0..h {
        for c in 0..w {
            if regions.m_in.get(r, c) {
                for k in 0..3 {
                    grad[(r, c, k)] = sign * inv_in;
                }
            }
            if regions.m_out.get(r, c) {
                for k in 0..3 {
                    grad[(r, c, k)] = -sign * inv_out;
                }
            }
        }
    }
    (
        BoundaryLoss {
            value: diff.abs(),
            usable: true,
        },
        grad,
    )
}

fn clamp_score<S: Scalar>(score: S) -> S {
    score.max(S::c(SCORE_CLAMP)).min(S::c(1.0 - SCORE_CLAMP))
}

/// Generator-side adversarial loss from one critic score.
pub fn adversarial_loss_generator<S: Scalar>(critic_score: S, mode: GanLossMode) -> S {
    adversarial_loss_generator_grad(critic_score, mode).0
}

/// [`adversarial_loss_generator`] together with dL/dscore.
pub fn adversarial_loss_generator_grad<S: Scalar>(critic_score: S, mode: GanLossMode) -> (S, S) {
    let s = clamp_score(critic_score);
    match mode {
        GanLossMode::NonSaturating => (-(s.ln()), -S::one() / s),
        GanLossMode::Minimax => ((S::one() - s).ln(), -S::one() / (S::one() - s)),
    }
}

/// Critic objective: −log(score_real) − log(1 − score_fake).
pub fn critic_loss<S: Scalar>(score_real: S, score_fake: S) -> S {
    let r = clamp_score(score_real);
    let f = clamp_score(score_fake);
    -(r.ln()) - (S::one() - f).ln()
}

/// λ_sm·L_sm + λ_mat·L_mat + λ_bd·L_bd + λ_adv·L_adv, rejecting non-finite
/// parts with the offending component named.
pub fn total_generator_loss<S: Scalar>(parts: &LossParts<S>, weights: &LossWeights) -> Result<S> {
    for (component, v) in [
        ("l_sm", parts.l_sm),
        ("l_mat", parts.l_mat),
        ("l_bd", parts.l_bd),
        ("l_adv", parts.l_adv),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { component, step: 0 });
        }
    }
    Ok(S::c(weights.lambda_sm) * parts.l_sm
        + S::c(weights.lambda_mat) * parts.l_mat
        + S::c(weights.lambda_bd) * parts.l_bd
        + S::c(weights.lambda_adv) * parts.l_adv)
}

// sign with an exact-zero plateau, the subgradient choice used for |x|
fn signum_or_zero<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}
