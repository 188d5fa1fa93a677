//! The three networks: Param-Net (patch → relighting parameters), Matte-Net
//! (patch → blending layer), and D-Net (patch → realness score).
//!
//! Architectures are config-driven with two presets: `paper` at the scale the
//! method is normally trained (VGG-19-like classifier, 4-level U-Net, wide
//! critic) and `desk`, small enough that a full adversarial run finishes in
//! minutes on a CPU. Output ranges are enforced structurally — tanh/sigmoid
//! squashing — so they hold for arbitrary weight values.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::mask::ShadowMask;
use crate::nn::{
    concat_channels, global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward,
    max_pool2, max_pool2_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels,
    upsample2, upsample2_backward, Conv2d, Conv2dCtx, Conv2dGrad, Linear, LinearGrad,
};
use crate::physics::{squash_params, squash_params_unbounded, MatteLayer, ShadowParams};
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.2;

/// Param-Net layout: conv stages (each ends in 2×2 max-pool), then a
/// two-layer head on the globally pooled descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamNetConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub head_hidden: usize,
}

/// Matte-Net layout: a U-Net with `depth` down/up levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatteNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub convs_per_block: usize,
}

/// D-Net layout: stride-2 conv stages, then a 1-channel conv and global pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DNetConfig {
    pub stage_channels: Vec<usize>,
}

/// Full architecture description, embedded verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub param_net: ParamNetConfig,
    pub matte_net: MatteNetConfig,
    pub d_net: DNetConfig,
}

impl ModelConfig {
    /// CPU-friendly sizing for experiments and the acceptance run.
    pub fn desk() -> Self {
        Self {
            patch_size: 32,
            param_net: ParamNetConfig {
                stage_channels: vec![8, 16, 32],
                convs_per_stage: vec![1, 1, 1],
                head_hidden: 32,
            },
            matte_net: MatteNetConfig {
                base_channels: 8,
                depth: 2,
                convs_per_block: 1,
            },
            d_net: DNetConfig {
                stage_channels: vec![8, 16, 32, 32],
            },
        }
    }

    /// Publication-scale sizing: VGG-19-like parameter branch, 4-level U-Net,
    /// wide critic, 128×128 patches.
    pub fn paper() -> Self {
        Self {
            patch_size: 128,
            param_net: ParamNetConfig {
                stage_channels: vec![64, 128, 256, 512, 512],
                convs_per_stage: vec![2, 2, 4, 4, 4],
                head_hidden: 512,
            },
            matte_net: MatteNetConfig {
                base_channels: 64,
                depth: 4,
                convs_per_block: 2,
            },
            d_net: DNetConfig {
                stage_channels: vec![64, 128, 256, 512],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.patch_size;
        if self.param_net.stage_channels.len() != self.param_net.convs_per_stage.len() {
            return Err(Error::Config(
                "param_net stage_channels and convs_per_stage lengths differ".into(),
            ));
        }
        let pn_div = 1usize << self.param_net.stage_channels.len();
        let mn_div = 1usize << self.matte_net.depth;
        if n % pn_div != 0 || n / pn_div == 0 {
            return Err(Error::Config(format!(
                "patch size {n} incompatible with {} param-net stages",
                self.param_net.stage_channels.len()
            )));
        }
        if n % mn_div != 0 || n / mn_div == 0 {
            return Err(Error::Config(format!(
                "patch size {n} incompatible with matte-net depth {}",
                self.matte_net.depth
            )));
        }
        if self.d_net.stage_channels.is_empty() {
            return Err(Error::Config("d_net needs at least one stage".into()));
        }
        Ok(())
    }
}

// A run of conv+ReLU layers sharing one output width.
#[derive(Debug, Clone)]
struct ConvBlock<S: Scalar> {
    convs: Vec<Conv2d<S>>,
}

struct ConvBlockCtx<S: Scalar> {
    // per conv: the conv cache and the pre-activation output
    steps: Vec<(Conv2dCtx<S>, Array4<S>)>,
}

#[derive(Debug, Clone)]
struct ConvBlockGrad<S: Scalar> {
    convs: Vec<Conv2dGrad<S>>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(rng: &mut impl Rng, in_ch: usize, out_ch: usize, count: usize) -> Self {
        let mut convs = Vec::with_capacity(count);
        for i in 0..count {
            let ic = if i == 0 { in_ch } else { out_ch };
            convs.push(Conv2d::new(rng, ic, out_ch, 3, 1, 1));
        }
        Self { convs }
    }

    fn forward(&self, x: &Array4<S>) -> (Array4<S>, ConvBlockCtx<S>) {
        let mut steps = Vec::with_capacity(self.convs.len());
        let mut cur = x.clone();
        for conv in &self.convs {
            let (pre, ctx) = conv.forward(&cur);
            cur = relu(&pre);
            steps.push((ctx, pre));
        }
        (cur, ConvBlockCtx { steps })
    }

    fn backward(&self, ctx: &ConvBlockCtx<S>, dy: &Array4<S>) -> (Array4<S>, ConvBlockGrad<S>) {
        let mut grads = vec![None; self.convs.len()];
        let mut cur = dy.clone();
        for i in (0..self.convs.len()).rev() {
            let (conv_ctx, pre) = &ctx.steps[i];
            let d_pre = relu_backward(pre, &cur);
            let (dx, grad) = self.convs[i].backward(conv_ctx, &d_pre);
            grads[i] = Some(grad);
            cur = dx;
        }
        (
            cur,
            ConvBlockGrad {
                convs: grads.into_iter().map(|g| g.unwrap()).collect(),
            },
        )
    }
}

/// Predicts the 6 raw relighting values from a 4-channel (RGB + mask) patch.
#[derive(Debug, Clone)]
pub struct ParamNet<S: Scalar> {
    stages: Vec<ConvBlock<S>>,
    fc1: Linear<S>,
    fc2: Linear<S>,
}

pub struct ParamNetCtx<S: Scalar> {
    stage_ctx: Vec<ConvBlockCtx<S>>,
    pool_args: Vec<Array4<u8>>,
    pre_pool_dims: Vec<(usize, usize, usize, usize)>,
    gap_in_dims: (usize, usize, usize, usize),
    gap_out: Array2<S>,
    fc1_pre: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct ParamNetGrads<S: Scalar> {
    stages: Vec<ConvBlockGrad<S>>,
    fc1: LinearGrad<S>,
    fc2: LinearGrad<S>,
}

impl<S: Scalar> ParamNet<S> {
    pub fn new(rng: &mut impl Rng, cfg: &ParamNetConfig) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 4;
        for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
            stages.push(ConvBlock::new(rng, in_ch, out_ch, cfg.convs_per_stage[i]));
            in_ch = out_ch;
        }
        let fc1 = Linear::new(rng, in_ch, cfg.head_hidden);
        let mut fc2 = Linear::new(rng, cfg.head_hidden, 6);
        // start near the squash midpoint: small head weights, zero bias
        fc2.weight.mapv_inplace(|v| v * S::c(0.01));
        Self { stages, fc1, fc2 }
    }

    /// Zeroes the final head layer, pinning the output to the squash midpoint.
    pub fn zero_head(&mut self) {
        self.fc2 = Linear::zeroed(self.fc2.weight.dim().0, 6);
    }

    /// x: (N, 4, n, n) → raw (N, 6).
    pub fn forward(&self, x: &Array4<S>) -> (Array2<S>, ParamNetCtx<S>) {
        let mut cur = x.clone();
        let mut stage_ctx = Vec::new();
        let mut pool_args = Vec::new();
        let mut pre_pool_dims = Vec::new();
        for stage in &self.stages {
            let (a, ctx) = stage.forward(&cur);
            pre_pool_dims.push(a.dim());
            let (pooled, arg) = max_pool2(&a);
            stage_ctx.push(ctx);
            pool_args.push(arg);
            cur = pooled;
        }
        let gap_in_dims = cur.dim();
        let gap_out = global_avg_pool(&cur);
        let fc1_pre = self.fc1.forward(&gap_out);
        let fc1_act = fc1_pre.mapv(|v| v.max(S::zero()));
        let raw = self.fc2.forward(&fc1_act);
        (
            raw,
            ParamNetCtx {
                stage_ctx,
                pool_args,
                pre_pool_dims,
                gap_in_dims,
                gap_out,
                fc1_pre,
            },
        )
    }

    pub fn backward(&self, ctx: &ParamNetCtx<S>, d_raw: &Array2<S>) -> ParamNetGrads<S> {
        let fc1_act = ctx.fc1_pre.mapv(|v| v.max(S::zero()));
        let (d_fc1_act, fc2_grad) = self.fc2.backward(&fc1_act, d_raw);
        let mut d_fc1_pre = d_fc1_act;
        d_fc1_pre.zip_mut_with(&ctx.fc1_pre, |g, &v| {
            if v <= S::zero() {
                *g = S::zero();
            }
        });
        let (d_gap, fc1_grad) = self.fc1.backward(&ctx.gap_out, &d_fc1_pre);
        let mut cur = global_avg_pool_backward(&d_gap, ctx.gap_in_dims);
        let mut stage_grads = vec![None; self.stages.len()];
        for i in (0..self.stages.len()).rev() {
            let d_pre_pool = max_pool2_backward(&ctx.pool_args[i], &cur, ctx.pre_pool_dims[i]);
            let (dx, grad) = self.stages[i].backward(&ctx.stage_ctx[i], &d_pre_pool);
            stage_grads[i] = Some(grad);
            cur = dx;
        }
        ParamNetGrads {
            stages: stage_grads.into_iter().map(|g| g.unwrap()).collect(),
            fc1: fc1_grad,
            fc2: fc2_grad,
        }
    }
}

/// Predicts the matte layer from a 7-channel (RGB + mask + relit RGB) patch.
#[derive(Debug, Clone)]
pub struct MatteNet<S: Scalar> {
    enc: Vec<ConvBlock<S>>,
    bottleneck: ConvBlock<S>,
    dec: Vec<ConvBlock<S>>, // dec[i] consumes the skip from enc[i]
    out_conv: Conv2d<S>,
}

pub struct MatteNetCtx<S: Scalar> {
    enc_ctx: Vec<ConvBlockCtx<S>>,
    skips: Vec<Array4<S>>,
    pool_args: Vec<Array4<u8>>,
    bottleneck_ctx: ConvBlockCtx<S>,
    dec_ctx: Vec<Option<ConvBlockCtx<S>>>,
    out_ctx: Conv2dCtx<S>,
    alpha: Array4<S>,
}

#[derive(Debug, Clone)]
pub struct MatteNetGrads<S: Scalar> {
    enc: Vec<ConvBlockGrad<S>>,
    bottleneck: ConvBlockGrad<S>,
    dec: Vec<ConvBlockGrad<S>>,
    out_conv: Conv2dGrad<S>,
}

impl<S: Scalar> MatteNet<S> {
    pub fn new(rng: &mut impl Rng, cfg: &MatteNetConfig) -> Self {
        let base = cfg.base_channels;
        let mut enc = Vec::new();
        let mut in_ch = 7;
        for i in 0..cfg.depth {
            let out_ch = base << i;
            enc.push(ConvBlock::new(rng, in_ch, out_ch, cfg.convs_per_block));
            in_ch = out_ch;
        }
        let bottleneck = ConvBlock::new(rng, in_ch, base << cfg.depth, cfg.convs_per_block);
        let mut dec = Vec::new();
        for i in 0..cfg.depth {
            let out_ch = base << i;
            // upsampled deeper features (2·out) concatenated with the skip (out)
            dec.push(ConvBlock::new(rng, 3 * out_ch, out_ch, cfg.convs_per_block));
        }
        let out_conv = Conv2d::new(rng, base, 1, 3, 1, 1);
        Self {
            enc,
            bottleneck,
            dec,
            out_conv,
        }
    }

    /// x: (N, 7, n, n) → α (N, 1, n, n) in [0,1].
    pub fn forward(&self, x: &Array4<S>) -> (Array4<S>, MatteNetCtx<S>) {
        let depth = self.enc.len();
        let mut cur = x.clone();
        let mut enc_ctx = Vec::new();
        let mut skips = Vec::new();
        let mut pool_args = Vec::new();
        for block in &self.enc {
            let (a, ctx) = block.forward(&cur);
            let (pooled, arg) = max_pool2(&a);
            enc_ctx.push(ctx);
            skips.push(a);
            pool_args.push(arg);
            cur = pooled;
        }
        let (mut cur, bottleneck_ctx) = self.bottleneck.forward(&cur);
        let mut dec_ctx: Vec<Option<ConvBlockCtx<S>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let up = upsample2(&cur);
            let cat = concat_channels(&[&up, &skips[i]]);
            let (out, ctx) = self.dec[i].forward(&cat);
            dec_ctx[i] = Some(ctx);
            cur = out;
        }
        let (logits, out_ctx) = self.out_conv.forward(&cur);
        let alpha = sigmoid(&logits);
        (
            alpha.clone(),
            MatteNetCtx {
                enc_ctx,
                skips,
                pool_args,
                bottleneck_ctx,
                dec_ctx,
                out_ctx,
                alpha,
            },
        )
    }

    /// d_alpha: gradient w.r.t. the matte. Returns (dx, grads); dx carries the
    /// gradient into all 7 input channels, including the relit image.
    pub fn backward(
        &self,
        ctx: &MatteNetCtx<S>,
        d_alpha: &Array4<S>,
    ) -> (Array4<S>, MatteNetGrads<S>) {
        let depth = self.enc.len();
        let d_logits = sigmoid_backward(&ctx.alpha, d_alpha);
        let (mut cur, out_grad) = self.out_conv.backward(&ctx.out_ctx, &d_logits);

        let mut dec_grads: Vec<Option<ConvBlockGrad<S>>> = (0..depth).map(|_| None).collect();
        let mut skip_grads: Vec<Option<Array4<S>>> = (0..depth).map(|_| None).collect();
        // decoder blocks were applied i = depth-1 .. 0, so unwind 0 .. depth-1
        for i in 0..depth {
            let (d_cat, grad) =
                self.dec[i].backward(ctx.dec_ctx[i].as_ref().unwrap(), &cur);
            dec_grads[i] = Some(grad);
            let up_ch = ctx.skips[i].dim().1 * 2;
            let parts = split_channels(&d_cat, &[up_ch, ctx.skips[i].dim().1]);
            skip_grads[i] = Some(parts[1].clone());
            cur = upsample2_backward(&parts[0]);
        }

        let (mut cur, bottleneck_grad) = self.bottleneck.backward(&ctx.bottleneck_ctx, &cur);
        let mut enc_grads: Vec<Option<ConvBlockGrad<S>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let mut d_pre_pool =
                max_pool2_backward(&ctx.pool_args[i], &cur, ctx.skips[i].dim());
            d_pre_pool += skip_grads[i].as_ref().unwrap();
            let (dx, grad) = self.enc[i].backward(&ctx.enc_ctx[i], &d_pre_pool);
            enc_grads[i] = Some(grad);
            cur = dx;
        }
        (
            cur,
            MatteNetGrads {
                enc: enc_grads.into_iter().map(|g| g.unwrap()).collect(),
                bottleneck: bottleneck_grad,
                dec: dec_grads.into_iter().map(|g| g.unwrap()).collect(),
                out_conv: out_grad,
            },
        )
    }
}

/// The critic: 3-channel patch → score in (0,1).
#[derive(Debug, Clone)]
pub struct DNet<S: Scalar> {
    stages: Vec<Conv2d<S>>,
    final_conv: Conv2d<S>,
}

pub struct DNetCtx<S: Scalar> {
    stage_ctx: Vec<(Conv2dCtx<S>, Array4<S>)>,
    final_ctx: Conv2dCtx<S>,
    final_dims: (usize, usize, usize, usize),
    scores: Array1<S>,
}

#[derive(Debug, Clone)]
pub struct DNetGrads<S: Scalar> {
    stages: Vec<Conv2dGrad<S>>,
    final_conv: Conv2dGrad<S>,
}

impl<S: Scalar> DNet<S> {
    pub fn new(rng: &mut impl Rng, cfg: &DNetConfig) -> Self {
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for &out_ch in &cfg.stage_channels {
            stages.push(Conv2d::new(rng, in_ch, out_ch, 3, 2, 1));
            in_ch = out_ch;
        }
        let final_conv = Conv2d::new(rng, in_ch, 1, 3, 1, 1);
        Self { stages, final_conv }
    }

    /// x: (N, 3, n, n) → scores (N) in (0,1).
    pub fn forward(&self, x: &Array4<S>) -> (Array1<S>, DNetCtx<S>) {
        let mut cur = x.clone();
        let mut stage_ctx = Vec::new();
        for conv in &self.stages {
            let (pre, ctx) = conv.forward(&cur);
            cur = leaky_relu(&pre, LEAKY_SLOPE);
            stage_ctx.push((ctx, pre));
        }
        let (final_map, final_ctx) = self.final_conv.forward(&cur);
        let final_dims = final_map.dim();
        let pooled = global_avg_pool(&final_map); // (N, 1)
        // clamp keeps the score an open-interval probability even when the
        // sigmoid saturates past float precision
        let lo = S::c(crate::losses::SCORE_CLAMP);
        let hi = S::c(1.0 - crate::losses::SCORE_CLAMP);
        let scores = Array1::from_iter(
            pooled
                .column(0)
                .iter()
                .map(|&v| (S::one() / (S::one() + (-v).exp())).max(lo).min(hi)),
        );
        (
            scores.clone(),
            DNetCtx {
                stage_ctx,
                final_ctx,
                final_dims,
                scores,
            },
        )
    }

    /// d_scores: gradient w.r.t. each sample's score. Returns (dx, grads).
    pub fn backward(&self, ctx: &DNetCtx<S>, d_scores: &Array1<S>) -> (Array4<S>, DNetGrads<S>) {
        let n = d_scores.len();
        let mut d_pooled = Array2::zeros((n, 1));
        for i in 0..n {
            let s = ctx.scores[i];
            d_pooled[(i, 0)] = d_scores[i] * s * (S::one() - s);
        }
        let d_final_map = global_avg_pool_backward(&d_pooled, ctx.final_dims);
        let (mut cur, final_grad) = self.final_conv.backward(&ctx.final_ctx, &d_final_map);
        let mut stage_grads = vec![None; self.stages.len()];
        for i in (0..self.stages.len()).rev() {
            let (conv_ctx, pre) = &ctx.stage_ctx[i];
            let d_pre = leaky_relu_backward(pre, &cur, LEAKY_SLOPE);
            let (dx, grad) = self.stages[i].backward(conv_ctx, &d_pre);
            stage_grads[i] = Some(grad);
            cur = dx;
        }
        (
            cur,
            DNetGrads {
                stages: stage_grads.into_iter().map(|g| g.unwrap()).collect(),
                final_conv: final_grad,
            },
        )
    }
}

/// The generator pair plus the critic, created from one config and seed.
#[derive(Debug, Clone)]
pub struct Networks<S: Scalar> {
    pub config: ModelConfig,
    pub param_net: ParamNet<S>,
    pub matte_net: MatteNet<S>,
    pub d_net: DNet<S>,
}

impl<S: Scalar> Networks<S> {
    pub fn new(rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            param_net: ParamNet::new(rng, &config.param_net),
            matte_net: MatteNet::new(rng, &config.matte_net),
            d_net: DNet::new(rng, &config.d_net),
        })
    }
}

// ---- flat parameter vectors -------------------------------------------

macro_rules! push_conv {
    ($out:expr, $conv:expr) => {
        crate::nn::flatten_into($out, &$conv.weight);
        crate::nn::flatten_into($out, &$conv.bias);
    };
}

macro_rules! pull_conv {
    ($src:expr, $pos:expr, $conv:expr) => {
        crate::nn::unflatten_from($src, $pos, &mut $conv.weight);
        crate::nn::unflatten_from($src, $pos, &mut $conv.bias);
    };
}

impl<S: Scalar> ParamNet<S> {
    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for conv in &stage.convs {
                push_conv!(&mut out, conv);
            }
        }
        crate::nn::flatten_into(&mut out, &self.fc1.weight);
        crate::nn::flatten_into(&mut out, &self.fc1.bias);
        crate::nn::flatten_into(&mut out, &self.fc2.weight);
        crate::nn::flatten_into(&mut out, &self.fc2.bias);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[S]) {
        let mut pos = 0;
        for stage in &mut self.stages {
            for conv in &mut stage.convs {
                pull_conv!(flat, &mut pos, conv);
            }
        }
        crate::nn::unflatten_from(flat, &mut pos, &mut self.fc1.weight);
        crate::nn::unflatten_from(flat, &mut pos, &mut self.fc1.bias);
        crate::nn::unflatten_from(flat, &mut pos, &mut self.fc2.weight);
        crate::nn::unflatten_from(flat, &mut pos, &mut self.fc2.bias);
        assert_eq!(pos, flat.len(), "param vector length mismatch");
    }
}

impl<S: Scalar> ParamNetGrads<S> {
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for conv in &stage.convs {
                crate::nn::flatten_into(&mut out, &conv.weight);
                crate::nn::flatten_into(&mut out, &conv.bias);
            }
        }
        crate::nn::flatten_into(&mut out, &self.fc1.weight);
        crate::nn::flatten_into(&mut out, &self.fc1.bias);
        crate::nn::flatten_into(&mut out, &self.fc2.weight);
        crate::nn::flatten_into(&mut out, &self.fc2.bias);
        out
    }
}

impl<S: Scalar> MatteNet<S> {
    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for block in self.enc.iter().chain([&self.bottleneck]).chain(self.dec.iter()) {
            for conv in &block.convs {
                push_conv!(&mut out, conv);
            }
        }
        push_conv!(&mut out, self.out_conv);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[S]) {
        let mut pos = 0;
        for block in self
            .enc
            .iter_mut()
            .chain([&mut self.bottleneck])
            .chain(self.dec.iter_mut())
        {
            for conv in &mut block.convs {
                pull_conv!(flat, &mut pos, conv);
            }
        }
        pull_conv!(flat, &mut pos, self.out_conv);
        assert_eq!(pos, flat.len(), "param vector length mismatch");
    }
}

impl<S: Scalar> MatteNetGrads<S> {
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for block in self.enc.iter().chain([&self.bottleneck]).chain(self.dec.iter()) {
            for conv in &block.convs {
                crate::nn::flatten_into(&mut out, &conv.weight);
                crate::nn::flatten_into(&mut out, &conv.bias);
            }
        }
        crate::nn::flatten_into(&mut out, &self.out_conv.weight);
        crate::nn::flatten_into(&mut out, &self.out_conv.bias);
        out
    }
}

impl<S: Scalar> DNet<S> {
    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        for conv in &self.stages {
            push_conv!(&mut out, conv);
        }
        push_conv!(&mut out, self.final_conv);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[S]) {
        let mut pos = 0;
        for conv in &mut self.stages {
            pull_conv!(flat, &mut pos, conv);
        }
        pull_conv!(flat, &mut pos, self.final_conv);
        assert_eq!(pos, flat.len(), "param vector length mismatch");
    }
}

impl<S: Scalar> DNetGrads<S> {
    pub fn flatten(&self) -> Vec<S> {
        let mut out = Vec::new();
        for conv in &self.stages {
            crate::nn::flatten_into(&mut out, &conv.weight);
            crate::nn::flatten_into(&mut out, &conv.bias);
        }
        crate::nn::flatten_into(&mut out, &self.final_conv.weight);
        crate::nn::flatten_into(&mut out, &self.final_conv.bias);
        out
    }
}

// ---- tensor conversion and single-patch contract wrappers --------------

/// (H,W,3) image → (1,3,H,W) tensor.
pub fn image_to_tensor<S: Scalar>(img: &RasterImage<S>) -> Array4<S> {
    let (h, w, _) = img.pixels().dim();
    Array4::from_shape_fn((1, 3, h, w), |(_, k, r, c)| img.pixels()[(r, c, k)])
}

/// Mask → (1,1,H,W) tensor of 0/1 values.
pub fn mask_to_tensor<S: Scalar>(mask: &ShadowMask) -> Array4<S> {
    Array4::from_shape_fn((1, 1, mask.height(), mask.width()), |(_, _, r, c)| {
        if mask.get(r, c) {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// (N,3,H,W) tensor row `i` → image, clamped into [0,1].
pub fn tensor_to_image<S: Scalar>(t: &Array4<S>, i: usize) -> RasterImage<S> {
    let (_, _, h, w) = t.dim();
    RasterImage::from_fn(h, w, |r, c, k| t[(i, k, r, c)])
}

fn check_patch_size<S: Scalar>(img: &RasterImage<S>, n: usize) -> Result<()> {
    if img.height() != n || img.width() != n {
        return Err(Error::InvalidArgument(format!(
            "expected {n}x{n} patch, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Runs Param-Net on one patch and squashes into valid relighting params.
pub fn param_net_forward<S: Scalar>(
    networks: &Networks<S>,
    patch: &RasterImage<S>,
    mask: &ShadowMask,
    bounded: bool,
) -> Result<ShadowParams<S>> {
    let n = networks.config.patch_size;
    check_patch_size(patch, n)?;
    if mask.height() != n || mask.width() != n {
        return Err(Error::InvalidArgument(format!(
            "expected {n}x{n} mask, got {}x{}",
            mask.height(),
            mask.width()
        )));
    }
    let x = concat_channels(&[&image_to_tensor(patch), &mask_to_tensor(mask)]);
    let (raw, _) = networks.param_net.forward(&x);
    let raw6 = [
        raw[(0, 0)],
        raw[(0, 1)],
        raw[(0, 2)],
        raw[(0, 3)],
        raw[(0, 4)],
        raw[(0, 5)],
    ];
    if bounded {
        squash_params(raw6)
    } else {
        squash_params_unbounded(raw6)
    }
}

/// Runs Matte-Net on one patch triple, yielding a matte in [0,1].
pub fn matte_net_forward<S: Scalar>(
    networks: &Networks<S>,
    patch: &RasterImage<S>,
    mask: &ShadowMask,
    relit: &RasterImage<S>,
) -> Result<MatteLayer<S>> {
    let n = networks.config.patch_size;
    check_patch_size(patch, n)?;
    check_patch_size(relit, n)?;
    if mask.height() != n || mask.width() != n {
        return Err(Error::InvalidArgument("mask size mismatch".into()));
    }
    let x = concat_channels(&[
        &image_to_tensor(patch),
        &mask_to_tensor(mask),
        &image_to_tensor(relit),
    ]);
    let (alpha, _) = networks.matte_net.forward(&x);
    let (_, _, h, w) = alpha.dim();
    let arr = ndarray::Array2::from_shape_fn((h, w), |(r, c)| {
        alpha[(0, 0, r, c)].max(S::zero()).min(S::one())
    });
    MatteLayer::new(arr)
}

/// Runs the critic on one patch, yielding a score in (0,1).
pub fn d_net_forward<S: Scalar>(networks: &Networks<S>, patch: &RasterImage<S>) -> Result<S> {
    check_patch_size(patch, networks.config.patch_size)?;
    let (scores, _) = networks.d_net.forward(&image_to_tensor(patch));
    Ok(scores[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            patch_size: 16,
            param_net: ParamNetConfig {
                stage_channels: vec![4, 8],
                convs_per_stage: vec![1, 1],
                head_hidden: 8,
            },
            matte_net: MatteNetConfig {
                base_channels: 4,
                depth: 2,
                convs_per_block: 1,
            },
            d_net: DNetConfig {
                stage_channels: vec![4, 8],
            },
        }
    }

    #[test]
    fn zeroed_head_gives_squash_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut nets: Networks<f64> = Networks::new(&mut rng, &tiny_config()).unwrap();
        nets.param_net.zero_head();
        let patch = RasterImage::from_fn(16, 16, |_, _, _| rng.gen_range(0.0..1.0));
        let mask = ShadowMask::from_fn(16, 16, |r, _| r < 8);
        let p = param_net_forward(&nets, &patch, &mask, true).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(p.w[k], 5.5, epsilon = 1e-12);
            assert_abs_diff_eq!(p.b[k], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets: Networks<f32> = Networks::new(&mut rng, &tiny_config()).unwrap();
        let patch: RasterImage<f32> = RasterImage::from_fn(16, 16, |_, _, _| rng.gen_range(0.0..1.0));
        let mask = ShadowMask::from_fn(16, 16, |_, c| c < 5);
        let params = param_net_forward(&nets, &patch, &mask, true).unwrap();
        assert!(params.validate().is_ok());

        let relit = crate::physics::relight(&patch, &params).unwrap();
        let matte = matte_net_forward(&nets, &patch, &mask, &relit).unwrap();
        assert_eq!((matte.height(), matte.width()), (16, 16));

        let score = d_net_forward(&nets, &patch).unwrap();
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn wrong_patch_size_is_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nets: Networks<f32> = Networks::new(&mut rng, &tiny_config()).unwrap();
        let patch: RasterImage<f32> = RasterImage::constant(8, 8, 0.5);
        let mask = ShadowMask::zeros(8, 8);
        assert!(param_net_forward(&nets, &patch, &mask, true).is_err());
        assert!(d_net_forward(&nets, &patch).is_err());
    }

    #[test]
    fn range_guarantees_hold_for_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        for _ in 0..10 {
            let mut nets: Networks<f64> = Networks::new(&mut rng, &cfg).unwrap();
            // scramble with large random weights
            for flat in [
                &mut nets.param_net.params_flat(),
                &mut nets.matte_net.params_flat(),
                &mut nets.d_net.params_flat(),
            ] {
                for v in flat.iter_mut() {
                    *v = rng.gen_range(-5.0..5.0);
                }
            }
            let pn: Vec<f64> = (0..nets.param_net.params_flat().len())
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            nets.param_net.set_params_flat(&pn);
            let mn: Vec<f64> = (0..nets.matte_net.params_flat().len())
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            nets.matte_net.set_params_flat(&mn);
            let dn: Vec<f64> = (0..nets.d_net.params_flat().len())
                .map(|_| rng.gen_range(-5.0..5.0))
                .collect();
            nets.d_net.set_params_flat(&dn);

            let patch = RasterImage::from_fn(16, 16, |_, _, _| rng.gen_range(0.0..1.0));
            let mask = ShadowMask::from_fn(16, 16, |r, c| (r + c) % 3 == 0);
            let params = param_net_forward(&nets, &patch, &mask, true).unwrap();
            assert!(params.validate().is_ok());
            let relit = crate::physics::relight(&patch, &params).unwrap();
            let matte = matte_net_forward(&nets, &patch, &mask, &relit).unwrap();
            assert!(matte.alpha().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let score = d_net_forward(&nets, &patch).unwrap();
            assert!(score > 0.0 && score < 1.0);
        }
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nets: Networks<f64> = Networks::new(&mut rng, &tiny_config()).unwrap();
        let x = Array4::from_shape_fn((2, 4, 16, 16), |(_, c, r, col)| {
            ((c + r + col) % 5) as f64 / 5.0
        });
        // identical items in a batch produce identical outputs
        let (raw, _) = nets.param_net.forward(&x);
        for k in 0..6 {
            assert_abs_diff_eq!(raw[(0, k)], raw[(1, k)], epsilon = 1e-12);
        }
        // two runs agree exactly
        let (raw2, _) = nets.param_net.forward(&x);
        assert_eq!(raw, raw2);
    }

    #[test]
    fn params_flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nets: Networks<f64> = Networks::new(&mut rng, &tiny_config()).unwrap();
        let mut other: Networks<f64> = Networks::new(&mut rng, &tiny_config()).unwrap();
        other.param_net.set_params_flat(&nets.param_net.params_flat());
        other.matte_net.set_params_flat(&nets.matte_net.params_flat());
        other.d_net.set_params_flat(&nets.d_net.params_flat());
        assert_eq!(nets.param_net.params_flat(), other.param_net.params_flat());
        assert_eq!(nets.matte_net.params_flat(), other.matte_net.params_flat());
        assert_eq!(nets.d_net.params_flat(), other.d_net.params_flat());
    }

    #[test]
    fn network_backward_matches_finite_differences() {
        // end-to-end gradcheck through each net on a scalar projection loss
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig {
            patch_size: 8,
            param_net: ParamNetConfig {
                stage_channels: vec![3],
                convs_per_stage: vec![1],
                head_hidden: 4,
            },
            matte_net: MatteNetConfig {
                base_channels: 3,
                depth: 1,
                convs_per_block: 1,
            },
            d_net: DNetConfig {
                stage_channels: vec![3],
            },
        };
        let nets: Networks<f64> = Networks::new(&mut rng, &cfg).unwrap();

        // Param-Net: loss = Σ raw ⊙ proj
        let x = Array4::from_shape_fn((1, 4, 8, 8), |_| rng.gen_range(0.1..0.9));
        let proj = Array2::from_shape_fn((1, 6), |_| rng.gen_range(-1.0..1.0));
        let (_, ctx) = nets.param_net.forward(&x);
        let grads = nets.param_net.backward(&ctx, &proj).flatten();
        let flat = nets.param_net.params_flat();
        let eval = |params: &[f64]| {
            let mut net = nets.param_net.clone();
            net.set_params_flat(params);
            let (raw, _) = net.forward(&x);
            raw.iter().zip(proj.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        check_random_coords(&mut rng, &flat, &grads, eval);

        // Matte-Net: loss = Σ α ⊙ proj, also check input gradient
        let xm = Array4::from_shape_fn((1, 7, 8, 8), |_| rng.gen_range(0.1..0.9));
        let (alpha, ctxm) = nets.matte_net.forward(&xm);
        let projm = Array4::from_shape_fn(alpha.dim(), |_| rng.gen_range(-1.0..1.0));
        let (dx, gradsm) = nets.matte_net.backward(&ctxm, &projm);
        let flatm = nets.matte_net.params_flat();
        let evalm = |params: &[f64]| {
            let mut net = nets.matte_net.clone();
            net.set_params_flat(params);
            let (a, _) = net.forward(&xm);
            a.iter().zip(projm.iter()).map(|(p, q)| p * q).sum::<f64>()
        };
        check_random_coords(&mut rng, &flatm, &gradsm.flatten(), evalm);
        for idx in [(0, 0, 0, 0), (0, 4, 3, 3), (0, 6, 7, 7)] {
            let h = 1e-5;
            let mut xp = xm.clone();
            xp[idx] += h;
            let fp: f64 = nets.matte_net.forward(&xp).0.iter().zip(projm.iter()).map(|(p, q)| p * q).sum();
            xp[idx] -= 2.0 * h;
            let fm: f64 = nets.matte_net.forward(&xp).0.iter().zip(projm.iter()).map(|(p, q)| p * q).sum();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(dx[idx].abs()).max(1e-6);
            assert!((fd - dx[idx]).abs() / denom < 1e-4, "matte dx at {idx:?}");
        }

        // D-Net: loss = Σ scores ⊙ proj
        let xd = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(0.1..0.9));
        let (scores, ctxd) = nets.d_net.forward(&xd);
        let projd = Array1::from_shape_fn(scores.len(), |_| rng.gen_range(-1.0f64..1.0));
        let (_, gradsd) = nets.d_net.backward(&ctxd, &projd);
        let flatd = nets.d_net.params_flat();
        let evald = |params: &[f64]| {
            let mut net = nets.d_net.clone();
            net.set_params_flat(params);
            let (s, _) = net.forward(&xd);
            s.iter().zip(projd.iter()).map(|(a, b)| a * b).sum::<f64>()
        };
        check_random_coords(&mut rng, &flatd, &gradsd.flatten(), evald);
    }

    fn check_random_coords(
        rng: &mut ChaCha8Rng,
        flat: &[f64],
        grads: &[f64],
        eval: impl Fn(&[f64]) -> f64,
    ) {
        assert_eq!(flat.len(), grads.len());
        for _ in 0..8 {
            let i = rng.gen_range(0..flat.len());
            let h = 1e-5;
            let mut p = flat.to_vec();
            p[i] += h;
            let fp = eval(&p);
            p[i] -= 2.0 * h;
            let fm = eval(&p);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            assert!(
                (fd - grads[i]).abs() / denom < 1e-3,
                "coord {i}: analytic {} vs fd {fd}",
                grads[i]
            );
        }
    }

    #[test]
    fn paper_preset_constructs() {
        let cfg = ModelConfig::paper();
        cfg.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // just the critic: building the full VGG-scale stack is slow in tests
        let _d: DNet<f32> = DNet::new(&mut rng, &cfg.d_net);
        assert_eq!(cfg.patch_size, 128);
    }

    #[test]
    fn desk_preset_validates() {
        ModelConfig::desk().validate().unwrap();
    }
}
