//! Minimal CNN building blocks with explicit forward/backward passes.
//!
//! Convolution is im2col + GEMM (the GEMM row-chunked across rayon workers);
//! every op returns a context the matching `*_backward` consumes. Nothing
//! here knows about the shadow model — these are plain layers, checked
//! against finite differences in the tests.
//!
//! Tensors are NCHW `Array4`, feature vectors `Array2` (N, features).

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::scalar::Scalar;

/// Row-chunked parallel matrix multiply.
pub fn par_matmul<S: Scalar>(a: ArrayView2<'_, S>, b: ArrayView2<'_, S>) -> Array2<S> {
    let rows = a.nrows();
    let threads = rayon::current_num_threads().max(1);
    if threads == 1 || rows < 128 {
        return a.dot(&b);
    }
    let chunk = rows.div_ceil(threads);
    let parts: Vec<Array2<S>> = a
        .axis_chunks_iter(Axis(0), chunk)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|block| block.dot(&b))
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("chunked matmul parts stack")
}

fn randn<S: Scalar>(rng: &mut impl Rng, std: f64) -> S {
    let v: f64 = StandardNormal.sample(rng);
    S::c(v * std)
}

/// Unrolls x (N,C,H,W) into (N·OH·OW, C·KH·KW) patches for a k×k kernel.
fn im2col<S: Scalar>(
    x: &Array4<S>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<S>, usize, usize) {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((n * oh * ow, c * k * k));
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (ni * oh + ohi) * ow + owi;
                let mut col = 0;
                for ci in 0..c {
                    for khi in 0..k {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        for kwi in 0..k {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                cols[(row, col)] = x[(ni, ci, ih as usize, iw as usize)];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-adds column gradients back onto the input layout.
fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<S> {
    let (n, c, h, w) = dims;
    let mut dx = Array4::zeros(dims);
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = (ni * oh + ohi) * ow + owi;
                let mut col = 0;
                for ci in 0..c {
                    for khi in 0..k {
                        let ih = (ohi * stride + khi) as isize - pad as isize;
                        for kwi in 0..k {
                            let iw = (owi * stride + kwi) as isize - pad as isize;
                            if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                dx[(ni, ci, ih as usize, iw as usize)] += dcols[(row, col)];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// A k×k convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<S: Scalar> {
    /// (out_channels, in_channels, k, k)
    pub weight: Array4<S>,
    pub bias: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

/// Forward cache for the backward pass.
pub struct Conv2dCtx<S: Scalar> {
    cols: Array2<S>,
    x_dims: (usize, usize, usize, usize),
    oh: usize,
    ow: usize,
}

/// Weight/bias gradients of one convolution.
#[derive(Debug, Clone)]
pub struct Conv2dGrad<S: Scalar> {
    pub weight: Array4<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Conv2d<S> {
    /// He-normal initialization; bias zero.
    pub fn new(
        rng: &mut impl Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        let weight = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| randn(rng, std));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn weight_matrix(&self) -> Array2<S> {
        let (oc, ic, kh, kw) = self.weight.dim();
        let mut m = Array2::zeros((ic * kh * kw, oc));
        for o in 0..oc {
            let mut col = 0;
            for c in 0..ic {
                for a in 0..kh {
                    for b in 0..kw {
                        m[(col, o)] = self.weight[(o, c, a, b)];
                        col += 1;
                    }
                }
            }
        }
        m
    }

    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, Conv2dCtx<S>) {
        let (n, _, _, _) = x.dim();
        let k = self.weight.dim().2;
        let (cols, oh, ow) = im2col(x, k, self.stride, self.pad);
        let w_mat = self.weight_matrix();
        let mut y_mat = par_matmul(cols.view(), w_mat.view());
        let oc = self.out_channels();
        for mut row in y_mat.rows_mut() {
            for o in 0..oc {
                row[o] += self.bias[o];
            }
        }
        let mut y = Array4::zeros((n, oc, oh, ow));
        for ni in 0..n {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = (ni * oh + ohi) * ow + owi;
                    for o in 0..oc {
                        y[(ni, o, ohi, owi)] = y_mat[(row, o)];
                    }
                }
            }
        }
        (
            y,
            Conv2dCtx {
                cols,
                x_dims: x.dim(),
                oh,
                ow,
            },
        )
    }

    pub fn backward(&self, ctx: &Conv2dCtx<S>, dy: &Array4<S>) -> (Array4<S>, Conv2dGrad<S>) {
        let (n, oc, oh, ow) = dy.dim();
        let mut dy_mat = Array2::zeros((n * oh * ow, oc));
        for ni in 0..n {
            for ohi in 0..oh {
                for owi in 0..ow {
                    let row = (ni * oh + ohi) * ow + owi;
                    for o in 0..oc {
                        dy_mat[(row, o)] = dy[(ni, o, ohi, owi)];
                    }
                }
            }
        }
        let dbias = dy_mat.sum_axis(Axis(0));
        // dw = colsᵀ · dy
        let dw_mat = par_matmul(ctx.cols.t(), dy_mat.view());
        let (_, ic, kh, kw) = self.weight.dim();
        let mut dweight = Array4::zeros(self.weight.dim());
        for o in 0..oc {
            let mut col = 0;
            for c in 0..ic {
                for a in 0..kh {
                    for b in 0..kw {
                        dweight[(o, c, a, b)] = dw_mat[(col, o)];
                        col += 1;
                    }
                }
            }
        }
        // dx = col2im(dy · wᵀ)
        let w_mat = self.weight_matrix();
        let dcols = par_matmul(dy_mat.view(), w_mat.t());
        let dx = col2im(&dcols, ctx.x_dims, kh, self.stride, self.pad, ctx.oh, ctx.ow);
        (
            dx,
            Conv2dGrad {
                weight: dweight,
                bias: dbias,
            },
        )
    }
}

/// Fully connected layer on (N, features).
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar> {
    /// (in_features, out_features)
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad<S: Scalar> {
    pub weight: Array2<S>,
    pub bias: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(rng: &mut impl Rng, in_f: usize, out_f: usize) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((in_f, out_f), |_| randn(rng, std)),
            bias: Array1::zeros(out_f),
        }
    }

    /// Zero weights and bias: the head initialization that maps any input to
    /// the squash midpoint.
    pub fn zeroed(in_f: usize, out_f: usize) -> Self {
        Self {
            weight: Array2::zeros((in_f, out_f)),
            bias: Array1::zeros(out_f),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = par_matmul(x.view(), self.weight.view());
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&self, x: &Array2<S>, dy: &Array2<S>) -> (Array2<S>, LinearGrad<S>) {
        let dx = par_matmul(dy.view(), self.weight.t());
        let dweight = par_matmul(x.t(), dy.view());
        let dbias = dy.sum_axis(Axis(0));
        (
            dx,
            LinearGrad {
                weight: dweight,
                bias: dbias,
            },
        )
    }
}

/// ReLU; context is the input sign mask.
pub fn relu<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| v.max(S::zero()))
}

pub fn relu_backward<S: Scalar>(x: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= S::zero() {
            *g = S::zero();
        }
    });
    dx
}

/// LeakyReLU with the usual 0.2 slope for critic stability.
pub fn leaky_relu<S: Scalar>(x: &Array4<S>, slope: f64) -> Array4<S> {
    let a = S::c(slope);
    x.mapv(|v| if v > S::zero() { v } else { v * a })
}

pub fn leaky_relu_backward<S: Scalar>(x: &Array4<S>, dy: &Array4<S>, slope: f64) -> Array4<S> {
    let a = S::c(slope);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= S::zero() {
            *g *= a;
        }
    });
    dx
}

pub fn sigmoid<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| S::one() / (S::one() + (-v).exp()))
}

/// Backward through sigmoid given its *output* y.
pub fn sigmoid_backward<S: Scalar>(y: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| *g *= v * (S::one() - v));
    dx
}

/// 2×2 max pooling, stride 2. Requires even spatial dims; caches argmax.
pub fn max_pool2<S: Scalar>(x: &Array4<S>) -> (Array4<S>, Array4<u8>) {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let mut y = Array4::zeros((n, c, h / 2, w / 2));
    let mut arg = Array4::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h / 2 {
                for col in 0..w / 2 {
                    let mut best = x[(ni, ci, 2 * r, 2 * col)];
                    let mut best_i = 0u8;
                    for (i, (dr, dc)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = x[(ni, ci, 2 * r + dr, 2 * col + dc)];
                        if v > best {
                            best = v;
                            best_i = i as u8 + 1;
                        }
                    }
                    y[(ni, ci, r, col)] = best;
                    arg[(ni, ci, r, col)] = best_i;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<S: Scalar>(
    arg: &Array4<u8>,
    dy: &Array4<S>,
    in_dims: (usize, usize, usize, usize),
) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let mut dx = Array4::zeros(in_dims);
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    let (dr, dc) = match arg[(ni, ci, r, col)] {
                        0 => (0, 0),
                        1 => (0, 1),
                        2 => (1, 0),
                        _ => (1, 1),
                    };
                    dx[(ni, ci, 2 * r + dr, 2 * col + dc)] += dy[(ni, ci, r, col)];
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(ni, ci, r, col)| {
        x[(ni, ci, r / 2, col / 2)]
    })
}

pub fn upsample2_backward<S: Scalar>(dy: &Array4<S>) -> Array4<S> {
    let (n, c, h, w) = dy.dim();
    let mut dx = Array4::zeros((n, c, h / 2, w / 2));
    for ni in 0..n {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    dx[(ni, ci, r / 2, col / 2)] += dy[(ni, ci, r, col)];
                }
            }
        }
    }
    dx
}

/// Global average pool (N,C,H,W) -> (N,C).
pub fn global_avg_pool<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let inv = S::c(1.0 / (h * w) as f64);
    let mut y = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut acc = S::zero();
            for r in 0..h {
                for col in 0..w {
                    acc += x[(ni, ci, r, col)];
                }
            }
            y[(ni, ci)] = acc * inv;
        }
    }
    y
}

pub fn global_avg_pool_backward<S: Scalar>(
    dy: &Array2<S>,
    in_dims: (usize, usize, usize, usize),
) -> Array4<S> {
    let (_, _, h, w) = in_dims;
    let inv = S::c(1.0 / (h * w) as f64);
    Array4::from_shape_fn(in_dims, |(ni, ci, _, _)| dy[(ni, ci)] * inv)
}

/// Stacks tensors along the channel axis.
pub fn concat_channels<S: Scalar>(parts: &[&Array4<S>]) -> Array4<S> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("channel concat shapes agree")
}

/// Splits a channel-axis gradient back into per-part gradients.
pub fn split_channels<S: Scalar>(dy: &Array4<S>, channel_counts: &[usize]) -> Vec<Array4<S>> {
    let mut out = Vec::with_capacity(channel_counts.len());
    let mut start = 0;
    for &count in channel_counts {
        out.push(dy.slice(s![.., start..start + count, .., ..]).to_owned());
        start += count;
    }
    out
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = S::c(self.beta1);
        let b2 = S::c(self.beta2);
        let lr = S::c(self.lr);
        let eps = S::c(self.eps);
        let bc1 = S::c(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::c(1.0 - self.beta2.powi(self.t as i32));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Appends an array's elements (row-major) onto a flat buffer.
pub fn flatten_into<S: Scalar, D: ndarray::Dimension>(
    out: &mut Vec<S>,
    arr: &ndarray::Array<S, D>,
) {
    out.extend(arr.iter().copied());
}

/// Reads elements back from a flat buffer into an array, advancing `pos`.
pub fn unflatten_from<S: Scalar, D: ndarray::Dimension>(
    src: &[S],
    pos: &mut usize,
    arr: &mut ndarray::Array<S, D>,
) {
    for v in arr.iter_mut() {
        *v = src[*pos];
        *pos += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.gen_range(-1.0..1.0))
    }

    // scalar probe loss: sum(y ⊙ proj) for a fixed random projection
    fn proj_loss(y: &Array4<f64>, proj: &Array4<f64>) -> f64 {
        y.iter().zip(proj.iter()).map(|(a, b)| a * b).sum()
    }

    fn fd_vs_analytic(analytic: f64, mut f: impl FnMut(f64) -> f64, x: f64) {
        let h = 1e-5;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-6);
        assert!(
            (fd - analytic).abs() / denom < 1e-4,
            "analytic {analytic} vs fd {fd}"
        );
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 1), (2, 1)] {
            let conv: Conv2d<f64> = Conv2d::new(&mut rng, 2, 3, 3, stride, pad);
            let x = rand4(&mut rng, (2, 2, 6, 6));
            let (y, ctx) = conv.forward(&x);
            let proj = rand4(&mut rng, y.dim());
            let (dx, grad) = conv.backward(&ctx, &proj);

            // input gradient at a few positions
            for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5)] {
                let base = x[idx];
                fd_vs_analytic(
                    dx[idx],
                    |v| {
                        let mut xp = x.clone();
                        xp[idx] = v;
                        proj_loss(&conv.forward(&xp).0, &proj)
                    },
                    base,
                );
            }
            // weight gradient
            for idx in [(0, 0, 0, 0), (2, 1, 2, 2), (1, 0, 1, 1)] {
                let base = conv.weight[idx];
                fd_vs_analytic(
                    grad.weight[idx],
                    |v| {
                        let mut cp = conv.clone();
                        cp.weight[idx] = v;
                        proj_loss(&cp.forward(&x).0, &proj)
                    },
                    base,
                );
            }
            // bias gradient
            for o in 0..3 {
                let base = conv.bias[o];
                fd_vs_analytic(
                    grad.bias[o],
                    |v| {
                        let mut cp = conv.clone();
                        cp.bias[o] = v;
                        proj_loss(&cp.forward(&x).0, &proj)
                    },
                    base,
                );
            }
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin: Linear<f64> = Linear::new(&mut rng, 5, 4);
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let proj = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (dx, grad) = lin.backward(&x, &proj);
        let loss = |y: &Array2<f64>| -> f64 { y.iter().zip(proj.iter()).map(|(a, b)| a * b).sum() };

        for idx in [(0, 0), (2, 4), (1, 2)] {
            let base = x[idx];
            fd_vs_analytic(
                dx[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    loss(&lin.forward(&xp))
                },
                base,
            );
        }
        for idx in [(0, 0), (4, 3), (2, 1)] {
            let base = lin.weight[idx];
            fd_vs_analytic(
                grad.weight[idx],
                |v| {
                    let mut lp = lin.clone();
                    lp.weight[idx] = v;
                    loss(&lp.forward(&x))
                },
                base,
            );
        }
        for o in 0..4 {
            let base = lin.bias[o];
            fd_vs_analytic(
                grad.bias[o],
                |v| {
                    let mut lp = lin.clone();
                    lp.bias[o] = v;
                    loss(&lp.forward(&x))
                },
                base,
            );
        }
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let proj = rand4(&mut rng, (1, 2, 3, 3));

        let dx_relu = relu_backward(&x, &proj);
        let dx_leaky = leaky_relu_backward(&x, &proj, 0.2);
        let y_sig = sigmoid(&x);
        let dx_sig = sigmoid_backward(&y_sig, &proj);
        for idx in [(0, 0, 0, 0), (0, 1, 2, 2), (0, 0, 1, 2)] {
            let base = x[idx];
            fd_vs_analytic(
                dx_relu[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    proj_loss(&relu(&xp), &proj)
                },
                base,
            );
            fd_vs_analytic(
                dx_leaky[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    proj_loss(&leaky_relu(&xp, 0.2), &proj)
                },
                base,
            );
            fd_vs_analytic(
                dx_sig[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    proj_loss(&sigmoid(&xp), &proj)
                },
                base,
            );
        }
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (1, 2, 4, 4));

        let (y, arg) = max_pool2(&x);
        let proj = rand4(&mut rng, y.dim());
        let dx = max_pool2_backward(&arg, &proj, x.dim());
        for idx in [(0, 0, 0, 0), (0, 1, 3, 3), (0, 0, 2, 1)] {
            let base = x[idx];
            fd_vs_analytic(
                dx[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    proj_loss(&max_pool2(&xp).0, &proj)
                },
                base,
            );
        }

        let yu = upsample2(&x);
        let proj_u = rand4(&mut rng, yu.dim());
        let dxu = upsample2_backward(&proj_u);
        for idx in [(0, 0, 0, 0), (0, 1, 3, 2)] {
            let base = x[idx];
            fd_vs_analytic(
                dxu[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    proj_loss(&upsample2(&xp), &proj_u)
                },
                base,
            );
        }

        let yg = global_avg_pool(&x);
        let proj_g = Array2::from_shape_fn(yg.dim(), |_| rng.gen_range(-1.0..1.0));
        let dxg = global_avg_pool_backward(&proj_g, x.dim());
        for idx in [(0, 0, 1, 1), (0, 1, 0, 3)] {
            let base = x[idx];
            fd_vs_analytic(
                dxg[idx],
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    global_avg_pool(&xp)
                        .iter()
                        .zip(proj_g.iter())
                        .map(|(a, b)| a * b)
                        .sum()
                },
                base,
            );
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand4(&mut rng, (2, 3, 4, 4));
        let b = rand4(&mut rng, (2, 2, 4, 4));
        let joined = concat_channels(&[&a, &b]);
        assert_eq!(joined.dim(), (2, 5, 4, 4));
        let parts = split_channels(&joined, &[3, 2]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn par_matmul_matches_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Array2::from_shape_fn((300, 17), |_| rng.gen_range(-1.0f64..1.0));
        let b = Array2::from_shape_fn((17, 9), |_| rng.gen_range(-1.0f64..1.0));
        let got = par_matmul(a.view(), b.view());
        let want = a.dot(&b);
        for (x, y) in got.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (p - 3)^2 elementwise
        let mut p = vec![0.0f64; 4];
        let mut opt: Adam<f64> = Adam::new(4, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|v| 2.0 * (v - 3.0)).collect();
            opt.step(&mut p, &g);
        }
        for v in p {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand4(&mut rng, (2, 3, 2, 2));
        let b = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0f64..1.0));
        let mut flat = Vec::new();
        flatten_into(&mut flat, &a);
        flatten_into(&mut flat, &b);
        assert_eq!(flat.len(), 24 + 12);

        let mut a2 = Array4::<f64>::zeros((2, 3, 2, 2));
        let mut b2 = Array2::<f64>::zeros((3, 4));
        let mut pos = 0;
        unflatten_from(&flat, &mut pos, &mut a2);
        unflatten_from(&flat, &mut pos, &mut b2);
        assert_eq!(pos, flat.len());
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
