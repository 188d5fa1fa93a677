//! Shared test support: a synthetic shadow-image generator with known
//! ground-truth inverse parameters.
//!
//! The generator applies the shadow with direct per-pixel arithmetic
//! (`(1-s)·v + s·(v/w* + b*)`), independent of the library's relighting and
//! compositing code, so it can serve as the oracle for recovery experiments.

use deshadow_core::imaging::RasterImage;
use deshadow_core::mask::ShadowMask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One synthetic scene: the shadow-free image, its shadowed version with the
/// ground-truth inverse scale, and the hard mask a detector would produce.
pub struct SyntheticScene {
    pub id: String,
    pub shadow_free: RasterImage<f32>,
    pub shadowed: RasterImage<f32>,
    pub mask: ShadowMask,
    /// Ground-truth inverse scale: `shadow_free = w_true · shadowed` in the
    /// deep shadow (b_true = 0).
    pub w_true: f64,
}

pub struct SceneParams {
    pub size: usize,
    /// Soft-ramp half-width in pixels.
    pub ramp: f64,
    pub w_range: (f64, f64),
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            size: 64,
            ramp: 1.5,
            w_range: (2.0, 4.0),
        }
    }
}

// smooth low-frequency texture: bilinear interpolation of a 5x5 random grid
fn texture(rng: &mut ChaCha8Rng, size: usize, amplitude: f64) -> Vec<Vec<f64>> {
    let grid = 5usize;
    let knots: Vec<Vec<f64>> = (0..grid)
        .map(|_| (0..grid).map(|_| rng.gen_range(-amplitude..amplitude)).collect())
        .collect();
    let step = (grid - 1) as f64 / (size - 1) as f64;
    (0..size)
        .map(|r| {
            (0..size)
                .map(|c| {
                    let fy = r as f64 * step;
                    let fx = c as f64 * step;
                    let y0 = fy.floor() as usize;
                    let x0 = fx.floor() as usize;
                    let y1 = (y0 + 1).min(grid - 1);
                    let x1 = (x0 + 1).min(grid - 1);
                    let dy = fy - y0 as f64;
                    let dx = fx - x0 as f64;
                    knots[y0][x0] * (1.0 - dy) * (1.0 - dx)
                        + knots[y0][x1] * (1.0 - dy) * dx
                        + knots[y1][x0] * dy * (1.0 - dx)
                        + knots[y1][x1] * dy * dx
                })
                .collect()
        })
        .collect()
}

// signed distance into the shadow (positive = inside), for a half-plane or disk
enum Shape {
    HalfPlane { nx: f64, ny: f64, offset: f64 },
    Disk { cy: f64, cx: f64, radius: f64 },
}

impl Shape {
    fn signed_distance(&self, r: usize, c: usize) -> f64 {
        match self {
            Shape::HalfPlane { nx, ny, offset } => nx * c as f64 + ny * r as f64 - offset,
            Shape::Disk { cy, cx, radius } => {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                radius - (dy * dy + dx * dx).sqrt()
            }
        }
    }
}

/// Generates one scene, alternating half-plane and disk shadows by index.
pub fn make_scene(rng: &mut ChaCha8Rng, index: usize, params: &SceneParams) -> SyntheticScene {
    let size = params.size;
    let base = [
        rng.gen_range(0.35..0.80),
        rng.gen_range(0.35..0.80),
        rng.gen_range(0.35..0.80),
    ];
    let tex = texture(rng, size, 0.12);
    let shadow_free = RasterImage::from_fn(size, size, |r, c, k| {
        ((base[k] + tex[r][c]).clamp(0.02, 0.98)) as f32
    });

    let center = size as f64 / 2.0;
    let shape = if index % 2 == 0 {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (theta.cos(), theta.sin());
        let jitter = rng.gen_range(-(size as f64) / 8.0..(size as f64) / 8.0);
        Shape::HalfPlane {
            nx,
            ny,
            offset: nx * center + ny * center + jitter,
        }
    } else {
        Shape::Disk {
            cy: center + rng.gen_range(-6.0..6.0),
            cx: center + rng.gen_range(-6.0..6.0),
            radius: rng.gen_range(14.0..24.0),
        }
    };

    let w_true = rng.gen_range(params.w_range.0..params.w_range.1);
    let ramp = params.ramp;
    // shadow strength in [0,1]: 0 lit, 1 deep shadow
    let strength = |r: usize, c: usize| -> f64 {
        let d = shape.signed_distance(r, c);
        (d / (2.0 * ramp) + 0.5).clamp(0.0, 1.0)
    };
    let shadowed = RasterImage::from_fn(size, size, |r, c, k| {
        let v = shadow_free.pixels()[(r, c, k)] as f64;
        let s = strength(r, c);
        // direct oracle arithmetic: blend lit value with v/w_true
        (((1.0 - s) * v + s * (v / w_true)).clamp(0.0, 1.0)) as f32
    });
    let mask = ShadowMask::from_fn(size, size, |r, c| strength(r, c) > 0.5);

    SyntheticScene {
        id: format!("scene{index:04}"),
        shadow_free,
        shadowed,
        mask,
        w_true,
    }
}

/// Generates `count` scenes from one seed.
pub fn make_scenes(seed: u64, count: usize, params: &SceneParams) -> Vec<SyntheticScene> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| make_scene(&mut rng, i, params)).collect()
}

/// Plain RGB RMSE over the masked pixels — the test-side error metric,
/// independent of the library's LAB evaluator.
pub fn masked_rgb_rmse(a: &RasterImage<f32>, b: &RasterImage<f32>, mask: &ShadowMask) -> f64 {
    let mut sse = 0.0;
    let mut n = 0usize;
    for r in 0..a.height() {
        for c in 0..a.width() {
            if mask.get(r, c) {
                for k in 0..3 {
                    let d = a.pixels()[(r, c, k)] as f64 - b.pixels()[(r, c, k)] as f64;
                    sse += d * d;
                }
                n += 1;
            }
        }
    }
    (sse / (3 * n) as f64).sqrt()
}
