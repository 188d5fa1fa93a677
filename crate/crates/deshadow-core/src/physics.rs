//! The shadow decomposition model: linear relighting, matting composition,
//! and the bounded parameter search space.
//!
//! A shadow-free pixel is expressed as `relit*α + shadow*(1−α)` where the
//! relit value comes from a per-channel affine map `w·v + b`. Scales are
//! restricted to `[1, S_MAX]` and offsets to `±OFFSET_LIMIT` so the model can
//! only brighten, and mostly by scaling.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::scalar::Scalar;

/// Upper bound of the relighting scale factor.
pub const S_MAX: f64 = 10.0;

/// Offset bound in 8-bit units; divided by 255 on the [0,1] pixel scale.
pub const OFFSET_LIMIT_8BIT: f64 = 25.0;

/// Offset bound on the [0,1] pixel scale.
pub const OFFSET_LIMIT: f64 = OFFSET_LIMIT_8BIT / 255.0;

/// Per-channel affine relighting parameters (w, b), three pairs for R,G,B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowParams<S: Scalar> {
    pub w: [S; 3],
    pub b: [S; 3],
}

impl<S: Scalar> ShadowParams<S> {
    /// Parameters that leave the image unchanged.
    pub fn identity() -> Self {
        Self {
            w: [S::one(); 3],
            b: [S::zero(); 3],
        }
    }

    /// Checks the search-space bounds: w in [1, S_MAX], b in ±OFFSET_LIMIT.
    pub fn validate(&self) -> Result<()> {
        let s_max = S::c(S_MAX);
        let b_lim = S::c(OFFSET_LIMIT);
        for k in 0..3 {
            if !(self.w[k] >= S::one() && self.w[k] <= s_max) {
                return Err(Error::InvalidArgument(format!(
                    "w[{k}] = {} outside [1, {S_MAX}]",
                    self.w[k]
                )));
            }
            if !(self.b[k] >= -b_lim && self.b[k] <= b_lim) {
                return Err(Error::InvalidArgument(format!(
                    "b[{k}] = {} outside ±{OFFSET_LIMIT}",
                    self.b[k]
                )));
            }
        }
        Ok(())
    }
}

/// H×W matte layer with every value in [0,1]; 1 picks the relit pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MatteLayer<S: Scalar> {
    alpha: Array2<S>,
}

impl<S: Scalar> MatteLayer<S> {
    pub fn new(alpha: Array2<S>) -> Result<Self> {
        if alpha
            .iter()
            .any(|v| !v.is_finite() || *v < S::zero() || *v > S::one())
        {
            return Err(Error::InvalidArgument("matte values must lie in [0,1]".into()));
        }
        Ok(Self { alpha })
    }

    pub fn constant(height: usize, width: usize, value: S) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn alpha(&self) -> &Array2<S> {
        &self.alpha
    }

    pub fn into_alpha(self) -> Array2<S> {
        self.alpha
    }

    pub fn height(&self) -> usize {
        self.alpha.dim().0
    }

    pub fn width(&self) -> usize {
        self.alpha.dim().1
    }
}

/// Applies `clamp(w_k·v + b_k, 0, 1)` per channel.
pub fn relight<S: Scalar>(img: &RasterImage<S>, params: &ShadowParams<S>) -> Result<RasterImage<S>> {
    params.validate()?;
    let px = img.pixels();
    Ok(RasterImage::from_fn(img.height(), img.width(), |r, c, k| {
        params.w[k] * px[(r, c, k)] + params.b[k]
    }))
}

/// Per-pixel convex combination `relit·α + shadow·(1−α)`.
pub fn compose<S: Scalar>(
    shadow: &RasterImage<S>,
    relit: &RasterImage<S>,
    matte: &MatteLayer<S>,
) -> Result<RasterImage<S>> {
    let dims_ok = shadow.height() == relit.height()
        && shadow.width() == relit.width()
        && shadow.height() == matte.height()
        && shadow.width() == matte.width();
    if !dims_ok {
        return Err(Error::DimensionMismatch(format!(
            "shadow {}x{}, relit {}x{}, matte {}x{}",
            shadow.height(),
            shadow.width(),
            relit.height(),
            relit.width(),
            matte.height(),
            matte.width()
        )));
    }
    let s = shadow.pixels();
    let l = relit.pixels();
    let a = matte.alpha();
    Ok(RasterImage::from_fn(shadow.height(), shadow.width(), |r, c, k| {
        let alpha = a[(r, c)];
        l[(r, c, k)] * alpha + s[(r, c, k)] * (S::one() - alpha)
    }))
}

/// Maps 6 unconstrained reals into the bounded search space:
/// `w_k = 1 + (S_MAX−1)·(tanh(raw_k)+1)/2`, `b_k = OFFSET_LIMIT·tanh(raw_{k+3})`.
pub fn squash_params<S: Scalar>(raw: [S; 6]) -> Result<ShadowParams<S>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("raw parameters must be finite".into()));
    }
    let half = S::c(0.5);
    let span = S::c(S_MAX - 1.0);
    let b_lim = S::c(OFFSET_LIMIT);
    let mut w = [S::zero(); 3];
    let mut b = [S::zero(); 3];
    for k in 0..3 {
        w[k] = S::one() + span * (raw[k].tanh() + S::one()) * half;
        b[k] = b_lim * raw[k + 3].tanh();
        // tanh saturation can graze the bounds from outside by one ulp
        w[k] = w[k].max(S::one()).min(S::c(S_MAX));
        b[k] = b[k].max(-b_lim).min(b_lim);
    }
    Ok(ShadowParams { w, b })
}

/// The ablation variant without the search-space limits: `w ∈ [−S_MAX, S_MAX]`
/// and `b` spanning the full pixel range.
pub fn squash_params_unbounded<S: Scalar>(raw: [S; 6]) -> Result<ShadowParams<S>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("raw parameters must be finite".into()));
    }
    let mut w = [S::zero(); 3];
    let mut b = [S::zero(); 3];
    for k in 0..3 {
        w[k] = S::c(S_MAX) * raw[k].tanh();
        b[k] = raw[k + 3].tanh();
    }
    Ok(ShadowParams { w, b })
}

/// Serializes params as `{"w":[...], "b":[...]}` on the [0,1] pixel scale.
pub fn params_to_json<S: Scalar>(params: &ShadowParams<S>) -> String {
    let w: Vec<f64> = params.w.iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = params.b.iter().map(|v| v.f64()).collect();
    serde_json::json!({ "w": w, "b": b }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn relight_identity_params() {
        let img: RasterImage<f64> =
            RasterImage::from_fn(4, 4, |r, c, k| ((r + 2 * c + k) % 7) as f64 / 6.0);
        let out = relight(&img, &ShadowParams::identity()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn relight_direct_arithmetic() {
        let img: RasterImage<f64> = RasterImage::from_fn(1, 1, |_, _, k| [0.2, 0.3, 0.4][k]);
        let params = ShadowParams {
            w: [2.0, 2.0, 2.0],
            b: [0.05, 0.05, 0.05],
        };
        let out = relight(&img, &params).unwrap();
        assert_abs_diff_eq!(out.pixels()[(0, 0, 0)], 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(out.pixels()[(0, 0, 1)], 0.65, epsilon = 1e-12);
        assert_abs_diff_eq!(out.pixels()[(0, 0, 2)], 0.85, epsilon = 1e-12);
    }

    #[test]
    fn relight_clamps_overflow() {
        // raw value 10*0.5 = 5.0 clamps to 1.0
        let img: RasterImage<f64> = RasterImage::constant(2, 2, 0.5);
        let params = ShadowParams {
            w: [10.0; 3],
            b: [0.0; 3],
        };
        let out = relight(&img, &params).unwrap();
        for v in out.pixels().iter() {
            assert_abs_diff_eq!(*v, 1.0);
        }
    }

    #[test]
    fn relight_rejects_out_of_bound_params() {
        let img: RasterImage<f64> = RasterImage::constant(1, 1, 0.5);
        let bad_w = ShadowParams { w: [0.5, 1.0, 1.0], b: [0.0; 3] };
        assert!(relight(&img, &bad_w).is_err());
        let bad_b = ShadowParams { w: [1.0; 3], b: [0.2, 0.0, 0.0] };
        assert!(relight(&img, &bad_b).is_err());
    }

    #[test]
    fn compose_endpoints_and_midpoint() {
        let shadow: RasterImage<f64> = RasterImage::constant(3, 3, 0.2);
        let relit: RasterImage<f64> = RasterImage::constant(3, 3, 0.6);

        let zero = MatteLayer::constant(3, 3, 0.0).unwrap();
        assert_eq!(compose(&shadow, &relit, &zero).unwrap(), shadow);

        let one = MatteLayer::constant(3, 3, 1.0).unwrap();
        assert_eq!(compose(&shadow, &relit, &one).unwrap(), relit);

        let half = MatteLayer::constant(3, 3, 0.5).unwrap();
        let mid = compose(&shadow, &relit, &half).unwrap();
        for v in mid.pixels().iter() {
            assert_abs_diff_eq!(*v, 0.4, epsilon = 1e-12);
        }
    }

    #[test]
    fn compose_dimension_mismatch() {
        let a: RasterImage<f32> = RasterImage::constant(2, 2, 0.1);
        let b: RasterImage<f32> = RasterImage::constant(2, 3, 0.1);
        let m = MatteLayer::constant(2, 2, 0.5).unwrap();
        assert!(matches!(compose(&a, &b, &m), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn compose_identity_fixed_point() {
        // relight with identity params, then any matte: output == input
        // (α=0 and α=1 are exact; interior α up to one rounding step)
        let img: RasterImage<f64> =
            RasterImage::from_fn(5, 5, |r, c, k| ((r * c + k) % 9) as f64 / 8.0);
        let relit = relight(&img, &ShadowParams::identity()).unwrap();
        for alpha in [0.0, 1.0] {
            let matte = MatteLayer::constant(5, 5, alpha).unwrap();
            assert_eq!(compose(&img, &relit, &matte).unwrap(), img);
        }
        let matte = MatteLayer::constant(5, 5, 0.3).unwrap();
        let out = compose(&img, &relit, &matte).unwrap();
        for (a, b) in out.pixels().iter().zip(img.pixels().iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn squash_zero_is_midpoint() {
        let p = squash_params([0.0f64; 6]).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(p.w[k], 5.5, epsilon = 1e-12);
            assert_abs_diff_eq!(p.b[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn squash_saturates_to_bounds() {
        let p = squash_params([50.0f64, 50.0, 50.0, -50.0, -50.0, -50.0]).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(p.w[k], 10.0, epsilon = 1e-9);
            assert_abs_diff_eq!(p.b[k], -OFFSET_LIMIT, epsilon = 1e-9);
        }
    }

    #[test]
    fn squash_b_unit_raw() {
        // (25/255)·tanh(1), frozen from a scalar reference
        let p = squash_params([0.0f64, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.b[0], 0.07466609372115342, epsilon = 1e-12);
    }

    #[test]
    fn squash_rejects_non_finite() {
        assert!(squash_params([f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(squash_params([f64::INFINITY; 6]).is_err());
    }

    #[test]
    fn params_json_shape() {
        let p: ShadowParams<f64> = ShadowParams {
            w: [2.0, 3.0, 4.0],
            b: [0.01, -0.02, 0.0],
        };
        let v: serde_json::Value = serde_json::from_str(&params_to_json(&p)).unwrap();
        assert_eq!(v["w"].as_array().unwrap().len(), 3);
        assert_eq!(v["b"][1].as_f64().unwrap(), -0.02);
    }

    proptest! {
        #[test]
        fn squash_always_in_bounds(raw in proptest::array::uniform6(-1e6f64..1e6f64)) {
            let p = squash_params(raw).unwrap();
            prop_assert!(p.validate().is_ok());
        }

        #[test]
        fn relight_order_preserving_per_channel(
            a in 0.0f64..1.0, b in 0.0f64..1.0,
            w in 1.0f64..10.0, off in -0.098f64..0.098
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let img_lo: RasterImage<f64> = RasterImage::constant(1, 1, lo);
            let img_hi: RasterImage<f64> = RasterImage::constant(1, 1, hi);
            let params = ShadowParams { w: [w; 3], b: [off; 3] };
            let out_lo = relight(&img_lo, &params).unwrap();
            let out_hi = relight(&img_hi, &params).unwrap();
            prop_assert!(out_lo.pixels()[(0,0,0)] <= out_hi.pixels()[(0,0,0)] + 1e-12);
        }

        #[test]
        fn compose_monotone_in_alpha_when_relit_brighter(
            s in 0.0f64..0.5, delta in 0.0f64..0.5,
            a1 in 0.0f64..1.0, a2 in 0.0f64..1.0
        ) {
            let shadow: RasterImage<f64> = RasterImage::constant(2, 2, s);
            let relit: RasterImage<f64> = RasterImage::constant(2, 2, s + delta);
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let m_lo = MatteLayer::constant(2, 2, lo).unwrap();
            let m_hi = MatteLayer::constant(2, 2, hi).unwrap();
            let out_lo = compose(&shadow, &relit, &m_lo).unwrap();
            let out_hi = compose(&shadow, &relit, &m_hi).unwrap();
            prop_assert!(out_lo.pixels()[(0,0,0)] <= out_hi.pixels()[(0,0,0)] + 1e-12);
        }
    }
}
