//! Image representation, color-space conversion, resizing, and file I/O.
//!
//! Pixels live in `[0,1]` floats everywhere inside this crate; 8-bit values
//! are rescaled by 1/255 on load and by 255 on save. Constants quoted in
//! 8-bit units elsewhere (thresholds like 25 or 40) are divided by 255 at the
//! API boundary for the same reason.

use std::path::Path;

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An H×W×3 image with components in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage<S: Scalar> {
    pixels: Array3<S>,
}

/// An H×W×3 CIE L*a*b* image. L in `[0,100]`, a/b roughly `[-128,127]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage<S: Scalar> {
    pub pixels: Array3<S>,
}

impl<S: Scalar> RasterImage<S> {
    /// Wraps an H×W×3 array, validating shape and the `[0,1]` range.
    pub fn new(pixels: Array3<S>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be at least 1x1, got {h}x{w}"
            )));
        }
        if c != 3 {
            return Err(Error::Format(format!("expected 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < S::zero() || *v > S::one()) {
            return Err(Error::InvalidArgument(
                "pixel components must lie in [0,1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Builds an image by evaluating `f(row, col, channel)`; values are clamped to `[0,1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let pixels = Array3::from_shape_fn((height, width, 3), |(r, c, k)| {
            f(r, c, k).max(S::zero()).min(S::one())
        });
        Self { pixels }
    }

    /// A height×width image with every component equal to `value`.
    pub fn constant(height: usize, width: usize, value: S) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<S> {
        &self.pixels
    }

    /// Consumes the image, returning the raw pixel array.
    pub fn into_pixels(self) -> Array3<S> {
        self.pixels
    }

    /// Mean of the R,G,B components at one pixel.
    pub fn intensity(&self, row: usize, col: usize) -> S {
        let third = S::c(1.0 / 3.0);
        (self.pixels[(row, col, 0)] + self.pixels[(row, col, 1)] + self.pixels[(row, col, 2)])
            * third
    }

    /// Crops a `size`×`size` window with its top-left corner at (top, left).
    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Self> {
        if top + size > self.height() || left + size > self.width() {
            return Err(Error::InvalidArgument(format!(
                "crop {size}x{size} at ({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let view = self
            .pixels
            .slice(ndarray::s![top..top + size, left..left + size, ..]);
        Ok(Self {
            pixels: view.to_owned(),
        })
    }
}

/// Loads an 8-bit 3-channel image; each 8-bit value v maps to v/255.
///
/// Grayscale or RGBA files are rejected: masks have their own loader and
/// alpha would be silently meaningless here.
pub fn load_image<S: Scalar>(path: impl AsRef<Path>) -> Result<RasterImage<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes)?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::Format(format!(
                "{}: expected an 8-bit 3-channel image, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let scale = S::c(1.0 / 255.0);
    let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(r, c, k)| {
        S::c(rgb.get_pixel(c as u32, r as u32).0[k] as f64) * scale
    });
    RasterImage::new(pixels)
}

/// Saves as 8-bit PNG, rounding each component to the nearest of 256 levels.
pub fn save_image<S: Scalar>(img: &RasterImage<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for (r, c, k) in itercoords(img.height(), img.width()) {
        let v = (img.pixels()[(r, c, k)].f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        out.get_pixel_mut(c as u32, r as u32).0[k] = v;
    }
    out.save(path)?;
    Ok(())
}

fn itercoords(h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..h).flat_map(move |r| (0..w).flat_map(move |c| (0..3).map(move |k| (r, c, k))))
}

// sRGB D65 reference white and the CIE f(t) breakpoints.
const XN: f64 = 0.95047;
const ZN: f64 = 1.08883;
const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPS {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(ft: f64) -> f64 {
    let cubed = ft * ft * ft;
    if cubed > LAB_EPS {
        cubed
    } else {
        (116.0 * ft - 16.0) / LAB_KAPPA
    }
}

/// One sRGB pixel (components in [0,1]) to L*a*b* under D65.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = 0.4124564390896921 * r + 0.357576077643909 * g + 0.18043748326639894 * b;
    let y = 0.21267285140562248 * r + 0.715152155287818 * g + 0.07217499330655958 * b;
    let z = 0.019333895582329317 * r + 0.119192025881303 * g + 0.9503040785363677 * b;
    let fx = lab_f(x / XN);
    let fy = lab_f(y);
    let fz = lab_f(z / ZN);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_pixel_to_lab`]; output clamped to [0,1].
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = lab[1] / 500.0 + fy;
    let fz = fy - lab[2] / 200.0;
    let x = lab_f_inv(fx) * XN;
    let y = if lab[0] > LAB_EPS * LAB_KAPPA {
        fy * fy * fy
    } else {
        lab[0] / LAB_KAPPA
    };
    let z = lab_f_inv(fz) * ZN;
    let r = 3.2404541621141045 * x - 1.5371385127977166 * y - 0.498531409556016 * z;
    let g = -0.9692660305051868 * x + 1.8760108454466942 * y + 0.04155601753034983 * z;
    let b = 0.05564343095911469 * x - 0.20402591351675387 * y + 1.0572251882231791 * z;
    [
        linear_to_srgb(r).clamp(0.0, 1.0),
        linear_to_srgb(g).clamp(0.0, 1.0),
        linear_to_srgb(b).clamp(0.0, 1.0),
    ]
}

/// Converts sRGB to CIE L*a*b* (D65 white point, gamma decoding applied first).
pub fn rgb_to_lab<S: Scalar>(img: &RasterImage<S>) -> LabImage<S> {
    let (h, w, _) = img.pixels().dim();
    let mut pixels = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let rgb = [
                img.pixels()[(r, c, 0)].f64(),
                img.pixels()[(r, c, 1)].f64(),
                img.pixels()[(r, c, 2)].f64(),
            ];
            let lab = rgb_pixel_to_lab(rgb);
            for k in 0..3 {
                pixels[(r, c, k)] = S::c(lab[k]);
            }
        }
    }
    LabImage { pixels }
}

/// Converts L*a*b* back to sRGB, clamping to [0,1].
pub fn lab_to_rgb<S: Scalar>(img: &LabImage<S>) -> RasterImage<S> {
    let (h, w, _) = img.pixels.dim();
    RasterImage::from_fn(h, w, |r, c, k| {
        let lab = [
            img.pixels[(r, c, 0)].f64(),
            img.pixels[(r, c, 1)].f64(),
            img.pixels[(r, c, 2)].f64(),
        ];
        S::c(lab_pixel_to_rgb(lab)[k])
    })
}

/// Bilinear resize to exactly (out_h, out_w), half-pixel-center sampling.
pub fn resize<S: Scalar>(img: &RasterImage<S>, out_h: usize, out_w: usize) -> Result<RasterImage<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target dimensions must be positive".into(),
        ));
    }
    let (h, w, _) = img.pixels().dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut pixels = Array3::zeros((out_h, out_w, 3));
    for r in 0..out_h {
        let src_y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = src_y - y0 as f64;
        for c in 0..out_w {
            let src_x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = src_x - x0 as f64;
            for k in 0..3 {
                let p00 = img.pixels()[(y0, x0, k)].f64();
                let p01 = img.pixels()[(y0, x1, k)].f64();
                let p10 = img.pixels()[(y1, x0, k)].f64();
                let p11 = img.pixels()[(y1, x1, k)].f64();
                let top = p00 * (1.0 - fx) + p01 * fx;
                let bot = p10 * (1.0 - fx) + p11 * fx;
                pixels[(r, c, k)] = S::c((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    RasterImage::new(pixels)
}

/// Nearest-neighbor resize for binary arrays; preserves binarity by construction.
pub fn resize_nearest_u8(arr: &Array2<u8>, out_h: usize, out_w: usize) -> Result<Array2<u8>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "resize target dimensions must be positive".into(),
        ));
    }
    let (h, w) = arr.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array2::zeros((out_h, out_w));
    Zip::indexed(&mut out).for_each(|(r, c), v| {
        let y = (((r as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        *v = arr[(y, x)];
    });
    Ok(out)
}
