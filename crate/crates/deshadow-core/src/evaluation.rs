//! Quantitative evaluation: LAB RMSE over shadow / non-shadow / whole-image
//! pixel sets, and the static-video pseudo-ground-truth protocol.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::{resize, resize_nearest_u8, rgb_pixel_to_lab, RasterImage};
use crate::mask::{moving_shadow_mask, ShadowMask};
use crate::scalar::Scalar;

/// Side length every prediction/ground-truth pair is resampled to before the
/// still-image RMSE is computed.
pub const EVAL_SIZE: usize = 256;

/// RMSE over the masked pixels, the complement, and all pixels. A region with
/// no pixels reports `None` rather than 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmseTriple {
    pub shadow: Option<f64>,
    pub nonshadow: Option<f64>,
    pub all: f64,
}

// squared-error sums in LAB space over the mask split
fn lab_sse<S: Scalar>(
    pred: &RasterImage<S>,
    gt: &RasterImage<S>,
    mask: &ShadowMask,
) -> (f64, usize, f64, usize) {
    let (h, w) = (gt.height(), gt.width());
    let mut sse_shadow = 0.0;
    let mut n_shadow = 0usize;
    let mut sse_nonshadow = 0.0;
    let mut n_nonshadow = 0usize;
    for r in 0..h {
        for c in 0..w {
            let p = rgb_pixel_to_lab([
                pred.pixels()[(r, c, 0)].f64(),
                pred.pixels()[(r, c, 1)].f64(),
                pred.pixels()[(r, c, 2)].f64(),
            ]);
            let g = rgb_pixel_to_lab([
                gt.pixels()[(r, c, 0)].f64(),
                gt.pixels()[(r, c, 1)].f64(),
                gt.pixels()[(r, c, 2)].f64(),
            ]);
            let sse: f64 = (0..3).map(|k| (p[k] - g[k]) * (p[k] - g[k])).sum();
            if mask.get(r, c) {
                sse_shadow += sse;
                n_shadow += 1;
            } else {
                sse_nonshadow += sse;
                n_nonshadow += 1;
            }
        }
    }
    (sse_shadow, n_shadow, sse_nonshadow, n_nonshadow)
}

fn triple_from_sse(
    sse_shadow: f64,
    n_shadow: usize,
    sse_nonshadow: f64,
    n_nonshadow: usize,
) -> RmseTriple {
    let rmse = |sse: f64, n: usize| {
        if n == 0 {
            None
        } else {
            Some((sse / (3 * n) as f64).sqrt())
        }
    };
    let all = ((sse_shadow + sse_nonshadow) / (3 * (n_shadow + n_nonshadow)) as f64).sqrt();
    RmseTriple {
        shadow: rmse(sse_shadow, n_shadow),
        nonshadow: rmse(sse_nonshadow, n_nonshadow),
        all,
    }
}

/// LAB RMSE between prediction and ground truth, split by the shadow mask.
///
/// Both images are resampled to 256×256 bilinearly, the mask with nearest
/// neighbor; the RMSE averages squared LAB differences jointly over pixels
/// and the three channels.
pub fn rmse_lab<S: Scalar>(
    pred: &RasterImage<S>,
    gt: &RasterImage<S>,
    mask: &ShadowMask,
) -> Result<RmseTriple> {
    if mask.height() != gt.height() || mask.width() != gt.width() {
        return Err(Error::DimensionMismatch(format!(
            "gt {}x{} vs mask {}x{}",
            gt.height(),
            gt.width(),
            mask.height(),
            mask.width()
        )));
    }
    let pred = resize(pred, EVAL_SIZE, EVAL_SIZE)?;
    let gt = resize(gt, EVAL_SIZE, EVAL_SIZE)?;
    let bits = resize_nearest_u8(mask.bits(), EVAL_SIZE, EVAL_SIZE)?;
    let mask = ShadowMask::new(bits)?;
    let (ss, ns, sn, nn) = lab_sse(&pred, &gt, &mask);
    Ok(triple_from_sse(ss, ns, sn, nn))
}

/// Per-image entry of a dataset report.
#[derive(Debug, Clone, Serialize)]
pub struct ImageRmse {
    pub name: String,
    pub shadow: Option<f64>,
    pub nonshadow: Option<f64>,
    pub all: f64,
}

/// Dataset-level RMSE report.
#[derive(Debug, Clone, Serialize)]
pub struct RmseReport {
    pub rmse_shadow: Option<f64>,
    pub rmse_nonshadow: Option<f64>,
    pub rmse_all: f64,
    /// True when pixels were pooled across the set instead of averaging
    /// per-image RMSEs.
    pub pooled: bool,
    pub per_image: Vec<ImageRmse>,
}

/// Evaluates matching prediction/ground-truth/mask directories.
///
/// `pooled = false` (the usual convention) averages per-image RMSEs;
/// `pooled = true` accumulates squared errors across every pixel of the set.
pub fn eval_istd<S: Scalar>(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    mask_dir: impl AsRef<Path>,
    pooled: bool,
) -> Result<RmseReport> {
    let pred_dir = pred_dir.as_ref();
    let gt_dir = gt_dir.as_ref();
    let mask_dir = mask_dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|n| {
            let l = n.to_ascii_lowercase();
            l.ends_with(".png") || l.ends_with(".jpg") || l.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no ground-truth images in {}",
            gt_dir.display()
        )));
    }

    let mut per_image = Vec::new();
    let mut pool = (0.0f64, 0usize, 0.0f64, 0usize);
    for name in &names {
        let pred: RasterImage<S> = crate::imaging::load_image(pred_dir.join(name))?;
        let gt: RasterImage<S> = crate::imaging::load_image(gt_dir.join(name))?;
        let mask = crate::mask::load_mask(mask_dir.join(name))?;
        let pred_r = resize(&pred, EVAL_SIZE, EVAL_SIZE)?;
        let gt_r = resize(&gt, EVAL_SIZE, EVAL_SIZE)?;
        let mask_r = ShadowMask::new(resize_nearest_u8(mask.bits(), EVAL_SIZE, EVAL_SIZE)?)?;
        let (ss, ns, sn, nn) = lab_sse(&pred_r, &gt_r, &mask_r);
        let triple = triple_from_sse(ss, ns, sn, nn);
        per_image.push(ImageRmse {
            name: name.clone(),
            shadow: triple.shadow,
            nonshadow: triple.nonshadow,
            all: triple.all,
        });
        pool.0 += ss;
        pool.1 += ns;
        pool.2 += sn;
        pool.3 += nn;
    }

    let report = if pooled {
        let t = triple_from_sse(pool.0, pool.1, pool.2, pool.3);
        RmseReport {
            rmse_shadow: t.shadow,
            rmse_nonshadow: t.nonshadow,
            rmse_all: t.all,
            pooled: true,
            per_image,
        }
    } else {
        let mean_opt = |vals: Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let shadow = mean_opt(per_image.iter().filter_map(|i| i.shadow).collect());
        let nonshadow = mean_opt(per_image.iter().filter_map(|i| i.nonshadow).collect());
        let all = per_image.iter().map(|i| i.all).sum::<f64>() / per_image.len() as f64;
        RmseReport {
            rmse_shadow: shadow,
            rmse_nonshadow: nonshadow,
            rmse_all: all,
            pooled: false,
            per_image,
        }
    };
    Ok(report)
}

/// Max/min temporal composite of a static-camera video plus the derived
/// moving-shadow mask.
#[derive(Debug, Clone)]
pub struct VideoPseudoGT<S: Scalar> {
    pub v_max: RasterImage<S>,
    pub v_min: RasterImage<S>,
    pub moving_mask: ShadowMask,
    pub epsilon: S,
}

/// Builds the pseudo ground truth from ≥2 equally sized frames.
pub fn build_video_pseudo_gt<S: Scalar>(
    frames: &[RasterImage<S>],
    epsilon: S,
) -> Result<VideoPseudoGT<S>> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pseudo ground truth needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for (i, f) in frames.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(Error::Format(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                f.height(),
                f.width()
            )));
        }
    }
    let v_max = RasterImage::from_fn(h, w, |r, c, k| {
        frames
            .iter()
            .map(|f| f.pixels()[(r, c, k)])
            .fold(S::zero(), |a, b| a.max(b))
    });
    let v_min = RasterImage::from_fn(h, w, |r, c, k| {
        frames
            .iter()
            .map(|f| f.pixels()[(r, c, k)])
            .fold(S::one(), |a, b| a.min(b))
    });
    let moving_mask = moving_shadow_mask(&v_max, &v_min, epsilon)?;
    Ok(VideoPseudoGT {
        v_max,
        v_min,
        moving_mask,
        epsilon,
    })
}

/// Loads a frame directory (sorted by filename) into memory.
pub fn load_frames<S: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<RasterImage<S>>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter_map(|entry| entry.file_name().into_string().ok())
        .filter(|n| {
            let l = n.to_ascii_lowercase();
            l.ends_with(".png") || l.ends_with(".jpg") || l.ends_with(".jpeg")
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| crate::imaging::load_image(dir.join(n)))
        .collect()
}

/// Mean over frames of the LAB RMSE against `v_max`, restricted to the
/// moving-shadow mask (no resampling: frames are compared at native size).
/// Returns `None` when the moving mask is empty (video skipped).
pub fn eval_video<S: Scalar>(
    pred_frames: &[RasterImage<S>],
    pseudo_gt: &VideoPseudoGT<S>,
) -> Result<Option<f64>> {
    if pred_frames.is_empty() {
        return Err(Error::InvalidArgument("no prediction frames".into()));
    }
    if pseudo_gt.moving_mask.is_empty() {
        return Ok(None);
    }
    let (h, w) = (pseudo_gt.v_max.height(), pseudo_gt.v_max.width());
    let mut acc = 0.0;
    for (i, frame) in pred_frames.iter().enumerate() {
        if frame.height() != h || frame.width() != w {
            return Err(Error::DimensionMismatch(format!(
                "prediction frame {i} is {}x{}, expected {h}x{w}",
                frame.height(),
                frame.width()
            )));
        }
        let (ss, ns, _, _) = lab_sse(frame, &pseudo_gt.v_max, &pseudo_gt.moving_mask);
        acc += (ss / (3 * ns) as f64).sqrt();
    }
    Ok(Some(acc / pred_frames.len() as f64))
}
