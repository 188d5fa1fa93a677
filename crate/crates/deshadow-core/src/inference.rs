//! Full-image shadow removal from patch estimates.
//!
//! Boundary patches on the training grid are run through the networks; the
//! image-level relighting parameters are the critic-score-weighted convex
//! combination of the patch parameters, and the image matte is stitched from
//! patch mattes (score-weighted per pixel), then overridden to 0 on the
//! non-shadow region and 1 in the umbra. Pixels outside the dilated mask are
//! therefore bit-identical to the input.

use ndarray::{Array1, Array2, Array4};

use crate::checkpoint::TrainState;
use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::mask::{build_regions, RegionMasks, ShadowMask};
use crate::models::Networks;
use crate::patches::{crop_grid, PatchData, PatchLabel};
use crate::physics::{compose, relight, MatteLayer, ShadowParams};
use crate::scalar::Scalar;
use crate::trainer::mask_tensor_batch;

/// One boundary patch's network outputs.
#[derive(Debug, Clone)]
pub struct PatchEstimate<S: Scalar> {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub params: ShadowParams<S>,
    pub matte: MatteLayer<S>,
    pub critic_score: S,
}

/// Full-image removal output with the intermediate decomposition.
#[derive(Debug, Clone)]
pub struct RemovalResult<S: Scalar> {
    pub output: RasterImage<S>,
    pub params: ShadowParams<S>,
    pub matte: MatteLayer<S>,
    pub relit: RasterImage<S>,
    /// True when the mask was non-empty but no grid window straddled the
    /// boundary, and parameters came from the largest-overlap window instead.
    pub fallback_used: bool,
    pub boundary_patches: usize,
}

/// Runs the three networks over a batch of patches, producing estimates.
pub fn estimate_patches<S: Scalar>(
    networks: &Networks<S>,
    patches: &[PatchData<S>],
    bounded: bool,
) -> Result<Vec<PatchEstimate<S>>> {
    if patches.is_empty() {
        return Ok(vec![]);
    }
    let n = networks.config.patch_size;
    let b = patches.len();
    let mut x = Array4::zeros((b, 3, n, n));
    for (i, p) in patches.iter().enumerate() {
        if p.record.size != n {
            return Err(Error::InvalidArgument(format!(
                "patch size {} does not match model patch size {n}",
                p.record.size
            )));
        }
        for r in 0..n {
            for c in 0..n {
                for k in 0..3 {
                    x[(i, k, r, c)] = p.patch.pixels()[(r, c, k)];
                }
            }
        }
    }
    let masks: Vec<&ShadowMask> = patches.iter().map(|p| &p.mask_patch).collect();
    let mask_t = mask_tensor_batch::<S>(&masks);
    let pn_in = crate::nn::concat_channels(&[&x, &mask_t]);
    let (raw, _) = networks.param_net.forward(&pn_in);

    let mut params_list = Vec::with_capacity(b);
    let mut relit_t = Array4::zeros(x.dim());
    for i in 0..b {
        let raw6 = [
            raw[(i, 0)],
            raw[(i, 1)],
            raw[(i, 2)],
            raw[(i, 3)],
            raw[(i, 4)],
            raw[(i, 5)],
        ];
        let params = if bounded {
            crate::physics::squash_params(raw6)?
        } else {
            crate::physics::squash_params_unbounded(raw6)?
        };
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    let v = params.w[k] * x[(i, k, r, c)] + params.b[k];
                    relit_t[(i, k, r, c)] = v.max(S::zero()).min(S::one());
                }
            }
        }
        params_list.push(params);
    }

    let mn_in = crate::nn::concat_channels(&[&x, &mask_t, &relit_t]);
    let (alpha, _) = networks.matte_net.forward(&mn_in);

    // composed outputs are what the critic scores
    let mut out = Array4::zeros(x.dim());
    for i in 0..b {
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    let a = alpha[(i, 0, r, c)];
                    out[(i, k, r, c)] = relit_t[(i, k, r, c)] * a + x[(i, k, r, c)] * (S::one() - a);
                }
            }
        }
    }
    let (scores, _) = networks.d_net.forward(&out);

    let mut estimates = Vec::with_capacity(b);
    for (i, p) in patches.iter().enumerate() {
        let arr = Array2::from_shape_fn((n, n), |(r, c)| {
            alpha[(i, 0, r, c)].max(S::zero()).min(S::one())
        });
        estimates.push(PatchEstimate {
            top: p.record.top,
            left: p.record.left,
            size: n,
            params: params_list[i],
            matte: MatteLayer::new(arr)?,
            critic_score: scores[i],
        });
    }
    Ok(estimates)
}

/// Critic-score-weighted convex combination of patch parameters.
pub fn aggregate_params<S: Scalar>(estimates: &[PatchEstimate<S>]) -> Result<ShadowParams<S>> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot aggregate an empty estimate list".into(),
        ));
    }
    let total: S = estimates
        .iter()
        .fold(S::zero(), |acc, e| acc + e.critic_score);
    let mut w = [S::zero(); 3];
    let mut b = [S::zero(); 3];
    for e in estimates {
        let weight = e.critic_score / total;
        for k in 0..3 {
            w[k] += weight * e.params.w[k];
            b[k] += weight * e.params.b[k];
        }
    }
    Ok(ShadowParams { w, b })
}

// L1 chamfer distance to the set marked 1; usize::MAX/2 when the set is empty.
fn chamfer_distance(set: &ShadowMask) -> Array2<usize> {
    let (h, w) = set.bits().dim();
    let inf = usize::MAX / 4;
    let mut d = Array2::from_elem((h, w), inf);
    for r in 0..h {
        for c in 0..w {
            if set.get(r, c) {
                d[(r, c)] = 0;
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            let mut best = d[(r, c)];
            if r > 0 {
                best = best.min(d[(r - 1, c)] + 1);
            }
            if c > 0 {
                best = best.min(d[(r, c - 1)] + 1);
            }
            d[(r, c)] = best;
        }
    }
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let mut best = d[(r, c)];
            if r + 1 < h {
                best = best.min(d[(r + 1, c)] + 1);
            }
            if c + 1 < w {
                best = best.min(d[(r, c + 1)] + 1);
            }
            d[(r, c)] = best;
        }
    }
    d
}

/// Stitches patch mattes into an image matte: per-pixel score-weighted mean
/// of covering patches, umbra forced to 1 and non-shadow to 0. Penumbra
/// pixels no patch covers take a distance ramp between umbra and non-shadow.
pub fn stitch_matte<S: Scalar>(
    estimates: &[PatchEstimate<S>],
    regions: &RegionMasks,
    height: usize,
    width: usize,
) -> MatteLayer<S> {
    let mut acc = Array2::<S>::zeros((height, width));
    let mut weight = Array2::<S>::zeros((height, width));
    for e in estimates {
        let s = e.critic_score;
        for r in 0..e.size {
            for c in 0..e.size {
                let rr = e.top + r;
                let cc = e.left + c;
                acc[(rr, cc)] += e.matte.alpha()[(r, c)] * s;
                weight[(rr, cc)] += s;
            }
        }
    }
    // ramp fallback for uncovered penumbra pixels
    let d_umbra = chamfer_distance(&regions.umbra);
    let d_nonshadow = chamfer_distance(&regions.nonshadow);
    let alpha = Array2::from_shape_fn((height, width), |(r, c)| {
        if regions.nonshadow.get(r, c) {
            S::zero()
        } else if regions.umbra.get(r, c) {
            S::one()
        } else if weight[(r, c)] > S::zero() {
            (acc[(r, c)] / weight[(r, c)]).max(S::zero()).min(S::one())
        } else {
            let dn = d_nonshadow[(r, c)] as f64;
            let du = d_umbra[(r, c)] as f64;
            if dn + du == 0.0 {
                S::c(0.5)
            } else {
                S::c(dn / (dn + du))
            }
        }
    });
    MatteLayer::new(alpha).expect("stitched matte stays in [0,1]")
}

/// Removes the shadow from a full image given its mask and a trained state.
pub fn remove_shadow<S: Scalar>(
    img: &RasterImage<S>,
    mask: &ShadowMask,
    state: &TrainState<S>,
) -> Result<RemovalResult<S>> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            mask.height(),
            mask.width()
        )));
    }
    let n = state.networks.config.patch_size;
    let bounded = !state.config.ablation.no_bounds;

    if mask.is_empty() {
        // nothing to remove
        return Ok(RemovalResult {
            output: img.clone(),
            params: ShadowParams::identity(),
            matte: MatteLayer::constant(img.height(), img.width(), S::zero())?,
            relit: img.clone(),
            fallback_used: false,
            boundary_patches: 0,
        });
    }
    if img.height() < n || img.width() < n {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {n}x{n} inference patch",
            img.height(),
            img.width()
        )));
    }

    let stride = (n / 4).max(1);
    let grid = crop_grid(img, mask, "input", n, stride)?;
    let boundary: Vec<PatchData<S>> = grid
        .iter()
        .filter(|p| p.record.label == PatchLabel::B)
        .cloned()
        .collect();

    let (estimates, fallback_used) = if boundary.is_empty() {
        // no window straddles the boundary; use the one with most shadow
        let best = grid
            .iter()
            .max_by_key(|p| p.mask_patch.count_ones())
            .expect("grid is non-empty");
        (
            estimate_patches(&state.networks, std::slice::from_ref(best), bounded)?,
            true,
        )
    } else {
        (
            estimate_patches(&state.networks, &boundary, bounded)?,
            false,
        )
    };

    let params = aggregate_params(&estimates)?;
    let regions = build_regions(mask, state.config.morph_radius)?;
    let matte = stitch_matte(&estimates, &regions, img.height(), img.width());
    let relit = relight(img, &params)?;
    let output = compose(img, &relit, &matte)?;
    Ok(RemovalResult {
        output,
        params,
        matte,
        relit,
        fallback_used,
        boundary_patches: estimates.len(),
    })
}

/// The scores vector normalized to sum to 1, exposed for diagnostics.
pub fn normalized_scores<S: Scalar>(estimates: &[PatchEstimate<S>]) -> Array1<S> {
    let total: S = estimates
        .iter()
        .fold(S::zero(), |acc, e| acc + e.critic_score);
    Array1::from_iter(estimates.iter().map(|e| e.critic_score / total))
}
