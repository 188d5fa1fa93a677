//! The adversarial training loop: boundary patches drive the generator pair
//! (Param-Net + Matte-Net), non-shadow patches are the critic's reals, and
//! updates alternate critic-then-generator each step.
//!
//! A step runs the full decomposition forward (params → relit → matte →
//! composed output), scores the output with the critic, and backpropagates
//! the weighted objective through every path — including the matte network's
//! relit input channels and the clamp in the relighting.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, TrainState};
use crate::error::{Error, Result};
use crate::imaging::RasterImage;
use crate::losses::{
    adversarial_loss_generator_grad, boundary_loss_grad, critic_loss, matting_loss_grad,
    smoothness_loss_grad, total_generator_loss, GanLossMode, LossParts, LossWeights,
};
use crate::mask::{build_regions, RegionMasks, ShadowMask};
use crate::models::{mask_to_tensor, ModelConfig, Networks};
use crate::nn::Adam;
use crate::patches::{crop_grid, PatchData, PatchLabel, PatchManifest, PatchRecord};
use crate::physics::{MatteLayer, OFFSET_LIMIT, S_MAX};
use crate::scalar::Scalar;

/// Per-loss ablation switches; each removes one ingredient of the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Unbounded parameter search space instead of w∈[1,10], b∈±25/255.
    pub no_bounds: bool,
    pub no_bd: bool,
    pub no_mat: bool,
    pub no_sm: bool,
    pub no_gan: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.no_bounds || self.no_bd || self.no_mat || self.no_sm || self.no_gan
    }
}

/// Training hyperparameters; defaults follow the published recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for Matte-Net and D-Net.
    pub lr_matte_d: f64,
    /// Learning rate for Param-Net (an order of magnitude lower).
    pub lr_param: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub gan_mode: GanLossMode,
    pub ablation: Ablation,
    pub seed: u64,
    /// Structuring-element radius for the penumbra rings.
    pub morph_radius: usize,
    /// Save a checkpoint every k epochs (0 = final only).
    pub checkpoint_every_epochs: usize,
    /// Optional linear learning-rate decay down to this fraction of the
    /// initial rates at the last step.
    pub lr_decay_to: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            epochs: 150,
            lr_matte_d: 2e-4,
            lr_param: 2e-5,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            gan_mode: GanLossMode::NonSaturating,
            ablation: Ablation::default(),
            seed: 0,
            morph_radius: 3,
            checkpoint_every_epochs: 0,
            lr_decay_to: None,
        }
    }
}

impl TrainConfig {
    /// Small-scale recipe paired with [`ModelConfig::desk`]: fewer, larger
    /// steps so a run converges within a CPU-minutes budget.
    pub fn desk() -> Self {
        Self {
            batch_size: 16,
            epochs: 10,
            lr_matte_d: 2e-3,
            lr_param: 1e-3,
            morph_radius: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_matte_d <= 0.0 || self.lr_param <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 (real and fake samples)".into(),
            ));
        }
        if self.morph_radius < 1 {
            return Err(Error::Config("morphology radius must be >= 1".into()));
        }
        Ok(())
    }

    /// Loss weights with ablated components zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.no_bd {
            w.lambda_bd = 0.0;
        }
        if self.ablation.no_mat {
            w.lambda_mat = 0.0;
        }
        if self.ablation.no_sm {
            w.lambda_sm = 0.0;
        }
        if self.ablation.no_gan {
            w.lambda_adv = 0.0;
        }
        w
    }
}

/// One step's logged losses.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_mat: f64,
    pub l_sm: f64,
    pub l_bd: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub d_loss: f64,
}

/// Supplies pixel data for manifest records.
pub trait PatchSource<S: Scalar> {
    fn get(&self, record: &PatchRecord) -> Result<PatchData<S>>;
}

/// Re-cuts patches from images on disk, caching decoded images.
pub struct DirectorySource<S: Scalar> {
    image_dir: std::path::PathBuf,
    mask_dir: std::path::PathBuf,
    cache: Mutex<HashMap<String, (RasterImage<S>, ShadowMask)>>,
}

impl<S: Scalar> DirectorySource<S> {
    pub fn new(image_dir: impl Into<std::path::PathBuf>, mask_dir: impl Into<std::path::PathBuf>) -> Self {
        Self {
            image_dir: image_dir.into(),
            mask_dir: mask_dir.into(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn for_manifest(manifest: &PatchManifest) -> Self {
        Self::new(&manifest.header.image_dir, &manifest.header.mask_dir)
    }
}

impl<S: Scalar> PatchSource<S> for DirectorySource<S> {
    fn get(&self, record: &PatchRecord) -> Result<PatchData<S>> {
        let mut cache = self.cache.lock().expect("patch cache lock");
        if !cache.contains_key(&record.image_id) {
            let img = crate::imaging::load_image(self.image_dir.join(&record.image_id))?;
            let mask = crate::mask::load_mask(self.mask_dir.join(&record.image_id))?;
            cache.insert(record.image_id.clone(), (img, mask));
        }
        let (img, mask) = cache.get(&record.image_id).unwrap();
        Ok(PatchData {
            record: record.clone(),
            patch: img.crop(record.top, record.left, record.size)?,
            mask_patch: mask.crop(record.top, record.left, record.size)?,
        })
    }
}

/// In-memory image set, for synthetic experiments and tests.
pub struct MemorySource<S: Scalar> {
    pub images: HashMap<String, (RasterImage<S>, ShadowMask)>,
}

impl<S: Scalar> PatchSource<S> for MemorySource<S> {
    fn get(&self, record: &PatchRecord) -> Result<PatchData<S>> {
        let (img, mask) = self.images.get(&record.image_id).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown image id {}", record.image_id))
        })?;
        Ok(PatchData {
            record: record.clone(),
            patch: img.crop(record.top, record.left, record.size)?,
            mask_patch: mask.crop(record.top, record.left, record.size)?,
        })
    }
}

/// Creates a fresh training state from configs and the config seed.
pub fn init_state<S: Scalar>(model: &ModelConfig, config: &TrainConfig) -> Result<TrainState<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let networks: Networks<S> = Networks::new(&mut rng, model)?;
    let np = networks.param_net.params_flat().len();
    let nm = networks.matte_net.params_flat().len();
    let nd = networks.d_net.params_flat().len();
    Ok(TrainState {
        opt_param: Adam::new(np, config.lr_param, config.beta1, config.beta2),
        opt_matte: Adam::new(nm, config.lr_matte_d, config.beta1, config.beta2),
        opt_d: Adam::new(nd, config.lr_matte_d, config.beta1, config.beta2),
        networks,
        config: config.clone(),
        step: 0,
    })
}

// Stacked batch tensors plus per-sample penumbra geometry.
struct GeneratorBatch<S: Scalar> {
    x: Array4<S>,    // (B,3,n,n)
    mask: Array4<S>, // (B,1,n,n)
    regions: Vec<RegionMasks>,
}

fn stack_batch<S: Scalar>(patches: &[PatchData<S>], radius: usize) -> Result<GeneratorBatch<S>> {
    let b = patches.len();
    let n = patches[0].record.size;
    let mut x = Array4::zeros((b, 3, n, n));
    let mut mask = Array4::zeros((b, 1, n, n));
    let mut regions = Vec::with_capacity(b);
    for (i, p) in patches.iter().enumerate() {
        let px = p.patch.pixels();
        for r in 0..n {
            for c in 0..n {
                for k in 0..3 {
                    x[(i, k, r, c)] = px[(r, c, k)];
                }
                mask[(i, 0, r, c)] = if p.mask_patch.get(r, c) { S::one() } else { S::zero() };
            }
        }
        regions.push(build_regions(&p.mask_patch, radius)?);
    }
    Ok(GeneratorBatch { x, mask, regions })
}

fn stack_images<S: Scalar>(patches: &[PatchData<S>]) -> Array4<S> {
    let b = patches.len();
    let n = patches[0].record.size;
    let mut x = Array4::zeros((b, 3, n, n));
    for (i, p) in patches.iter().enumerate() {
        let px = p.patch.pixels();
        for r in 0..n {
            for c in 0..n {
                for k in 0..3 {
                    x[(i, k, r, c)] = px[(r, c, k)];
                }
            }
        }
    }
    x
}

// squash plus its derivative w.r.t. the raw values, honoring the bounds flag
fn squash_batch<S: Scalar>(
    raw: &Array2<S>,
    bounded: bool,
) -> (Array2<S>, Array2<S>, Array2<S>, Array2<S>) {
    let b = raw.dim().0;
    let mut w = Array2::zeros((b, 3));
    let mut bias = Array2::zeros((b, 3));
    let mut dw_draw = Array2::zeros((b, 3));
    let mut db_draw = Array2::zeros((b, 3));
    let half_span = S::c((S_MAX - 1.0) / 2.0);
    let b_lim = S::c(OFFSET_LIMIT);
    let s_max = S::c(S_MAX);
    for i in 0..b {
        for k in 0..3 {
            let tw = raw[(i, k)].tanh();
            let tb = raw[(i, k + 3)].tanh();
            let sech2_w = S::one() - tw * tw;
            let sech2_b = S::one() - tb * tb;
            if bounded {
                w[(i, k)] = S::one() + half_span * (tw + S::one());
                bias[(i, k)] = b_lim * tb;
                dw_draw[(i, k)] = half_span * sech2_w;
                db_draw[(i, k)] = b_lim * sech2_b;
            } else {
                w[(i, k)] = s_max * tw;
                bias[(i, k)] = tb;
                dw_draw[(i, k)] = s_max * sech2_w;
                db_draw[(i, k)] = sech2_b;
            }
        }
    }
    (w, bias, dw_draw, db_draw)
}

fn matte_row<S: Scalar>(alpha: &Array4<S>, i: usize) -> MatteLayer<S> {
    let (_, _, h, w) = alpha.dim();
    let arr = Array2::from_shape_fn((h, w), |(r, c)| {
        alpha[(i, 0, r, c)].max(S::zero()).min(S::one())
    });
    MatteLayer::new(arr).expect("sigmoid output is a valid matte")
}

fn image_row<S: Scalar>(t: &Array4<S>, i: usize) -> RasterImage<S> {
    let (_, _, h, w) = t.dim();
    RasterImage::from_fn(h, w, |r, c, k| t[(i, k, r, c)])
}

fn decayed_lr(base: f64, config: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    match config.lr_decay_to {
        None => base,
        Some(final_fraction) => {
            let progress = if total_steps == 0 {
                0.0
            } else {
                (step as f64 / total_steps as f64).min(1.0)
            };
            base * (1.0 - progress * (1.0 - final_fraction))
        }
    }
}

/// One critic update followed by one generator update.
///
/// `total_steps` only matters when learning-rate decay is configured; pass 0
/// for constant rates.
pub fn train_step<S: Scalar>(
    state: &mut TrainState<S>,
    batch_b: &[PatchData<S>],
    batch_n: &[PatchData<S>],
    total_steps: u64,
) -> Result<LossRecord> {
    if batch_b.is_empty() || batch_n.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let config = state.config.clone();
    let weights = config.effective_weights();
    let bounded = !config.ablation.no_bounds;
    let batch = stack_batch(batch_b, config.morph_radius)?;
    let bsz = batch_b.len();
    let inv_b = S::c(1.0 / bsz as f64);

    // generator forward ---------------------------------------------------
    let pn_in = crate::nn::concat_channels(&[&batch.x, &batch.mask]);
    let (raw, pn_ctx) = state.networks.param_net.forward(&pn_in);
    let (w, bias, dw_draw, db_draw) = squash_batch(&raw, bounded);

    let (n_b, _, n, _) = batch.x.dim();
    let mut relit_pre = Array4::zeros(batch.x.dim());
    for i in 0..n_b {
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    relit_pre[(i, k, r, c)] = w[(i, k)] * batch.x[(i, k, r, c)] + bias[(i, k)];
                }
            }
        }
    }
    let relit = relit_pre.mapv(|v| v.max(S::zero()).min(S::one()));

    let mn_in = crate::nn::concat_channels(&[&batch.x, &batch.mask, &relit]);
    let (alpha, mn_ctx) = state.networks.matte_net.forward(&mn_in);

    let mut out = Array4::zeros(batch.x.dim());
    for i in 0..n_b {
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    let a = alpha[(i, 0, r, c)];
                    out[(i, k, r, c)] =
                        relit[(i, k, r, c)] * a + batch.x[(i, k, r, c)] * (S::one() - a);
                }
            }
        }
    }

    // critic update (reals from the non-shadow set, fakes detached) -------
    let d_loss = if config.ablation.no_gan {
        0.0
    } else {
        let reals = stack_images(batch_n);
        let (scores_real, ctx_real) = state.networks.d_net.forward(&reals);
        let (scores_fake, ctx_fake) = state.networks.d_net.forward(&out);
        let n_real = scores_real.len();
        let n_fake = scores_fake.len();
        let mut loss = S::zero();
        for i in 0..n_real {
            loss += critic_loss(scores_real[i], S::c(0.5)) * S::c(1.0 / n_real as f64);
        }
        // critic_loss couples one real with one fake; accumulate the halves
        // separately since the batch sizes may differ
        let mut loss_fake = S::zero();
        for i in 0..n_fake {
            loss_fake += critic_loss(S::c(0.5), scores_fake[i]) * S::c(1.0 / n_fake as f64);
        }
        let ln2 = S::c(std::f64::consts::LN_2);
        let total = (loss - ln2) + (loss_fake - ln2);

        let d_real = Array1::from_shape_fn(n_real, |i| {
            -S::one() / scores_real[i].max(S::c(1e-7)) * S::c(1.0 / n_real as f64)
        });
        let d_fake = Array1::from_shape_fn(n_fake, |i| {
            S::one() / (S::one() - scores_fake[i]).max(S::c(1e-7)) * S::c(1.0 / n_fake as f64)
        });
        let (_, grads_real) = state.networks.d_net.backward(&ctx_real, &d_real);
        let (_, grads_fake) = state.networks.d_net.backward(&ctx_fake, &d_fake);
        let mut grad: Vec<S> = grads_real.flatten();
        for (g, h) in grad.iter_mut().zip(grads_fake.flatten()) {
            *g += h;
        }
        let mut params = state.networks.d_net.params_flat();
        state.opt_d.lr = decayed_lr(config.lr_matte_d, &config, state.step, total_steps);
        state.opt_d.step(&mut params, &grad);
        state.networks.d_net.set_params_flat(&params);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "d_loss",
                step: state.step,
            });
        }
        total.f64()
    };

    // generator losses against the (new) critic ---------------------------
    let mut l_mat = S::zero();
    let mut l_sm = S::zero();
    let mut l_bd = S::zero();
    let mut d_alpha = Array4::zeros(alpha.dim());
    let mut d_out = Array4::zeros(out.dim());
    for i in 0..n_b {
        let matte = matte_row(&alpha, i);
        let (v_mat, g_mat) = matting_loss_grad(&matte, &batch.regions[i])?;
        let (v_sm, g_sm) = smoothness_loss_grad(&matte)?;
        l_mat += v_mat * inv_b;
        l_sm += v_sm * inv_b;
        let out_img = image_row(&out, i);
        let (bd, g_bd) = boundary_loss_grad(&out_img, &batch.regions[i]);
        l_bd += bd.value * inv_b;
        let lam_mat = S::c(weights.lambda_mat);
        let lam_sm = S::c(weights.lambda_sm);
        let lam_bd = S::c(weights.lambda_bd);
        for r in 0..n {
            for c in 0..n {
                d_alpha[(i, 0, r, c)] +=
                    (lam_mat * g_mat[(r, c)] + lam_sm * g_sm[(r, c)]) * inv_b;
                for k in 0..3 {
                    d_out[(i, k, r, c)] += lam_bd * g_bd[(r, c, k)] * inv_b;
                }
            }
        }
    }

    let l_adv = if config.ablation.no_gan {
        S::zero()
    } else {
        let (scores, d_ctx) = state.networks.d_net.forward(&out);
        let mut value = S::zero();
        let mut d_scores = Array1::zeros(scores.len());
        for i in 0..scores.len() {
            let (v, g) = adversarial_loss_generator_grad(scores[i], config.gan_mode);
            value += v * inv_b;
            d_scores[i] = g * S::c(weights.lambda_adv) * inv_b;
        }
        let (dx_fake, _) = state.networks.d_net.backward(&d_ctx, &d_scores);
        d_out += &dx_fake;
        value
    };

    let parts = LossParts { l_sm, l_mat, l_bd, l_adv };
    let l_total = total_generator_loss(&parts, &weights).map_err(|e| match e {
        Error::NonFiniteLoss { component, .. } => Error::NonFiniteLoss {
            component,
            step: state.step,
        },
        other => other,
    })?;

    // generator backward ---------------------------------------------------
    // compose: d_alpha += Σ_k d_out·(relit − x);  d_relit = d_out·α
    let mut d_relit = Array4::zeros(relit.dim());
    for i in 0..n_b {
        for r in 0..n {
            for c in 0..n {
                let a = alpha[(i, 0, r, c)];
                let mut acc = S::zero();
                for k in 0..3 {
                    let g = d_out[(i, k, r, c)];
                    acc += g * (relit[(i, k, r, c)] - batch.x[(i, k, r, c)]);
                    d_relit[(i, k, r, c)] = g * a;
                }
                d_alpha[(i, 0, r, c)] += acc;
            }
        }
    }

    let (d_mn_in, mn_grads) = state.networks.matte_net.backward(&mn_ctx, &d_alpha);
    // the matte network saw the relit image too: channels 4..7
    for i in 0..n_b {
        for k in 0..3 {
            for r in 0..n {
                for c in 0..n {
                    d_relit[(i, k, r, c)] += d_mn_in[(i, 4 + k, r, c)];
                }
            }
        }
    }

    // clamp gate, then reduce to per-channel (w, b) gradients
    let mut d_w = Array2::zeros((n_b, 3));
    let mut d_b = Array2::zeros((n_b, 3));
    for i in 0..n_b {
        for k in 0..3 {
            let mut acc_w = S::zero();
            let mut acc_b = S::zero();
            for r in 0..n {
                for c in 0..n {
                    let pre = relit_pre[(i, k, r, c)];
                    if pre >= S::zero() && pre <= S::one() {
                        let g = d_relit[(i, k, r, c)];
                        acc_w += g * batch.x[(i, k, r, c)];
                        acc_b += g;
                    }
                }
            }
            d_w[(i, k)] = acc_w;
            d_b[(i, k)] = acc_b;
        }
    }
    let mut d_raw = Array2::zeros((n_b, 6));
    for i in 0..n_b {
        for k in 0..3 {
            d_raw[(i, k)] = d_w[(i, k)] * dw_draw[(i, k)];
            d_raw[(i, k + 3)] = d_b[(i, k)] * db_draw[(i, k)];
        }
    }
    let pn_grads = state.networks.param_net.backward(&pn_ctx, &d_raw);

    let mut pn_params = state.networks.param_net.params_flat();
    state.opt_param.lr = decayed_lr(config.lr_param, &config, state.step, total_steps);
    state.opt_param.step(&mut pn_params, &pn_grads.flatten());
    state.networks.param_net.set_params_flat(&pn_params);

    let mut mn_params = state.networks.matte_net.params_flat();
    state.opt_matte.lr = decayed_lr(config.lr_matte_d, &config, state.step, total_steps);
    state.opt_matte.step(&mut mn_params, &mn_grads.flatten());
    state.networks.matte_net.set_params_flat(&mn_params);

    state.step += 1;
    Ok(LossRecord {
        step: state.step,
        l_mat: l_mat.f64(),
        l_sm: l_sm.f64(),
        l_bd: l_bd.f64(),
        l_adv: l_adv.f64(),
        l_total: l_total.f64(),
        d_loss,
    })
}

/// Output of a training run: final state plus the per-step log.
pub struct TrainOutput<S: Scalar> {
    pub state: TrainState<S>,
    pub log: Vec<LossRecord>,
}

/// Trains from a manifest: boundary records feed the generator, non-shadow
/// records feed the critic, both reshuffled per epoch.
///
/// When `out_dir` is given, the JSONL step log and checkpoints (cadence per
/// config, plus `checkpoint_final.json`) are written there.
pub fn train<S: Scalar>(
    manifest: &PatchManifest,
    source: &dyn PatchSource<S>,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<S>> {
    let state = init_state(model, config)?;
    run_training(state, manifest, source, config.epochs, out_dir)
}

/// Continues training an existing state over a manifest.
pub fn resume<S: Scalar>(
    state: TrainState<S>,
    manifest: &PatchManifest,
    source: &dyn PatchSource<S>,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<S>> {
    run_training(state, manifest, source, epochs, out_dir)
}

fn run_training<S: Scalar>(
    mut state: TrainState<S>,
    manifest: &PatchManifest,
    source: &dyn PatchSource<S>,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<S>> {
    let config = state.config.clone();
    config.validate()?;
    if manifest.header.patch_size != state.networks.config.patch_size {
        return Err(Error::Config(format!(
            "manifest patch size {} does not match model patch size {}",
            manifest.header.patch_size, state.networks.config.patch_size
        )));
    }
    let b_records: Vec<&PatchRecord> = manifest.records_with_label(PatchLabel::B).collect();
    let n_records: Vec<&PatchRecord> = manifest.records_with_label(PatchLabel::N).collect();
    if b_records.is_empty() {
        return Err(Error::Config("manifest has no boundary (B) patches".into()));
    }
    if n_records.is_empty() {
        return Err(Error::Config("manifest has no non-shadow (N) patches".into()));
    }

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some(std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
            ))
        }
        None => None,
    };

    let steps_per_epoch = b_records.len().div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * epochs as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = Vec::new();
    let mut n_pool: Vec<&PatchRecord> = n_records.clone();
    let mut n_cursor = 0usize;

    for epoch in 0..epochs {
        let mut b_order = b_records.clone();
        b_order.shuffle(&mut rng);
        for chunk in b_order.chunks(config.batch_size) {
            let batch_b: Vec<PatchData<S>> = chunk
                .iter()
                .map(|r| source.get(r))
                .collect::<Result<_>>()?;
            let mut batch_n = Vec::with_capacity(chunk.len());
            for _ in 0..chunk.len() {
                if n_cursor == 0 {
                    n_pool.shuffle(&mut rng);
                }
                batch_n.push(source.get(n_pool[n_cursor])?);
                n_cursor = (n_cursor + 1) % n_pool.len();
            }
            let record = train_step(&mut state, &batch_b, &batch_n, total_steps)?;
            if let Some(f) = log_file.as_mut() {
                let mut line = serde_json::to_string(&record)?;
                line.push('\n');
                f.write_all(line.as_bytes())
                    .map_err(|e| Error::io("train_log.jsonl", e))?;
            }
            log.push(record);
        }
        if let Some(dir) = out_dir {
            let cadence = config.checkpoint_every_epochs;
            if cadence > 0 && (epoch + 1) % cadence == 0 {
                save_checkpoint(&state, dir.join(format!("checkpoint_epoch_{:04}.json", epoch + 1)))?;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io("train_log.jsonl", e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&state, dir.join("checkpoint_final.json"))?;
    }
    Ok(TrainOutput { state, log })
}

/// Fine-tunes a trained state on video frames with detector masks, rebuilding
/// the patch sets from the frames. Zero epochs is a no-op that still writes
/// the output checkpoint.
pub fn finetune_on_video<S: Scalar>(
    state: TrainState<S>,
    frames_dir: impl AsRef<Path>,
    masks_dir: impl AsRef<Path>,
    epochs: usize,
    out_dir: Option<&Path>,
) -> Result<TrainOutput<S>> {
    let n = state.networks.config.patch_size;
    let stride = (n / 4).max(1);
    let manifest = crate::patches::build_manifest::<S>(&frames_dir, &masks_dir, n, stride)?;
    if epochs == 0 {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            save_checkpoint(&state, dir.join("checkpoint_final.json"))?;
        }
        return Ok(TrainOutput { state, log: vec![] });
    }
    if manifest.header.count_b == 0 {
        return Err(Error::Config(
            "video frames produced no boundary patches to fine-tune on".into(),
        ));
    }
    if manifest.header.count_n == 0 {
        return Err(Error::Config(
            "video frames produced no non-shadow patches for the critic".into(),
        ));
    }
    let source = DirectorySource::new(frames_dir.as_ref(), masks_dir.as_ref());
    resume(state, &manifest, &source, epochs, out_dir)
}

/// Builds a generator batch directly from synthetic patch data; exposed for
/// experiments that bypass manifests.
pub fn patches_from_arrays<S: Scalar>(
    images: &[(String, RasterImage<S>, ShadowMask)],
    n: usize,
    m: usize,
) -> Result<(PatchManifest, MemorySource<S>)> {
    let mut records = Vec::new();
    let mut counts = (0usize, 0usize, 0usize);
    let mut map = HashMap::new();
    let mut sorted: Vec<_> = images.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, img, mask) in sorted {
        for data in crop_grid(img, mask, id, n, m)? {
            match data.record.label {
                PatchLabel::N => counts.0 += 1,
                PatchLabel::B => counts.1 += 1,
                PatchLabel::F => counts.2 += 1,
            }
            records.push(data.record);
        }
        map.insert(id.clone(), (img.clone(), mask.clone()));
    }
    let total = records.len();
    Ok((
        PatchManifest {
            header: crate::patches::ManifestHeader {
                patch_size: n,
                stride: m,
                image_dir: "<memory>".into(),
                mask_dir: "<memory>".into(),
                count_n: counts.0,
                count_b: counts.1,
                count_f: counts.2,
                total,
                skipped: vec![],
            },
            records,
        },
        MemorySource { images: map },
    ))
}

// Re-export used by the inference module: the mask tensor helper keeps the
// channel layout in one place.
pub(crate) fn mask_tensor_batch<S: Scalar>(masks: &[&ShadowMask]) -> Array4<S> {
    let views: Vec<Array4<S>> = masks.iter().map(|m| mask_to_tensor(m)).collect();
    let refs: Vec<_> = views.iter().map(|v| v.view()).collect();
    ndarray::concatenate(Axis(0), &refs).expect("mask batch shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::Rng;

    fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.patch_size = 16;
        cfg.param_net.stage_channels = vec![4, 8];
        cfg.param_net.convs_per_stage = vec![1, 1];
        cfg.param_net.head_hidden = 8;
        cfg.matte_net.base_channels = 4;
        cfg.d_net.stage_channels = vec![4, 8];
        cfg
    }

    fn synthetic_patches(seed: u64, count: usize) -> (Vec<PatchData<f64>>, Vec<PatchData<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bs = Vec::new();
        let mut ns = Vec::new();
        for i in 0..count {
            let base = rng.gen_range(0.4..0.8);
            let img: RasterImage<f64> = RasterImage::from_fn(16, 16, |r, c, _| {
                base + 0.1 * (((r * 7 + c * 3 + i) % 10) as f64 / 10.0 - 0.5)
            });
            let mask = ShadowMask::from_fn(16, 16, |r, _| r < 8);
            let dark = RasterImage::from_fn(16, 16, |r, c, k| {
                let v = img.pixels()[(r, c, k)];
                if mask.get(r, c) {
                    v / 2.5
                } else {
                    v
                }
            });
            bs.push(PatchData {
                record: PatchRecord {
                    image_id: format!("b{i}"),
                    top: 0,
                    left: 0,
                    size: 16,
                    label: PatchLabel::B,
                },
                patch: dark,
                mask_patch: mask,
            });
            let free: RasterImage<f64> = RasterImage::from_fn(16, 16, |r, c, _| {
                base + 0.1 * (((r * 5 + c * 11 + i) % 10) as f64 / 10.0 - 0.5)
            });
            ns.push(PatchData {
                record: PatchRecord {
                    image_id: format!("n{i}"),
                    top: 0,
                    left: 0,
                    size: 16,
                    label: PatchLabel::N,
                },
                patch: free,
                mask_patch: ShadowMask::zeros(16, 16),
            });
        }
        (bs, ns)
    }

    #[test]
    fn zero_lr_steps_are_deterministic() {
        let (bs, ns) = synthetic_patches(1, 4);
        let mut config = TrainConfig::desk();
        config.lr_matte_d = 0.0;
        config.lr_param = 0.0;
        config.morph_radius = 2;
        let mut state: TrainState<f64> = init_state(&tiny_model(), &config).unwrap();
        let r1 = train_step(&mut state, &bs, &ns, 0).unwrap();
        let r2 = train_step(&mut state, &bs, &ns, 0).unwrap();
        assert_eq!(r1.l_total, r2.l_total);
        assert_eq!(r1.l_mat, r2.l_mat);
        assert_eq!(r1.d_loss, r2.d_loss);
    }

    #[test]
    fn alpha_targets_alone_decrease_matting_loss() {
        // λ_adv = λ_bd = 0: the generator objective reduces to the α targets
        let (bs, ns) = synthetic_patches(2, 4);
        let mut config = TrainConfig::desk();
        config.weights.lambda_adv = 0.0;
        config.weights.lambda_bd = 0.0;
        config.ablation.no_gan = true;
        config.lr_matte_d = 1e-3;
        config.lr_param = 1e-4;
        config.morph_radius = 2;
        let mut state: TrainState<f64> = init_state(&tiny_model(), &config).unwrap();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..40 {
            let rec = train_step(&mut state, &bs, &ns, 0).unwrap();
            first.get_or_insert(rec.l_mat);
            last = rec.l_mat;
        }
        let first = first.unwrap();
        assert!(
            last < 0.5 * first,
            "matting loss should fall on a fixed batch: {first} -> {last}"
        );
    }

    #[test]
    fn gradients_reach_both_generator_networks() {
        let (bs, ns) = synthetic_patches(3, 4);
        let config = TrainConfig::desk();
        let mut state: TrainState<f64> = init_state(&tiny_model(), &config).unwrap();
        let before_p = state.networks.param_net.params_flat();
        let before_m = state.networks.matte_net.params_flat();
        train_step(&mut state, &bs, &ns, 0).unwrap();
        let after_p = state.networks.param_net.params_flat();
        let after_m = state.networks.matte_net.params_flat();
        let changed_p = before_p.iter().zip(&after_p).filter(|(a, b)| a != b).count();
        let changed_m = before_m.iter().zip(&after_m).filter(|(a, b)| a != b).count();
        assert!(
            changed_p > before_p.len() / 2,
            "param-net updated {changed_p}/{} weights",
            before_p.len()
        );
        assert!(
            changed_m > before_m.len() / 2,
            "matte-net updated {changed_m}/{} weights",
            before_m.len()
        );
    }

    #[test]
    fn training_loop_bookkeeping_and_reproducibility() {
        // 10 boundary patches, batch 4 -> ceil(10/4) = 3 steps per epoch
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut images = Vec::new();
        for i in 0..4 {
            let img: RasterImage<f64> =
                RasterImage::from_fn(32, 32, |_, _, _| rng.gen_range(0.2..0.9));
            let mask = ShadowMask::from_fn(32, 32, |r, c| r < 16 && c < 20 && i % 2 == 0);
            images.push((format!("img{i}"), img, mask));
        }
        let (manifest, source) = patches_from_arrays(&images, 16, 8).unwrap();
        assert!(manifest.header.count_b >= 10);
        let mut config = TrainConfig::desk();
        config.batch_size = 4;
        config.epochs = 1;
        config.seed = 7;
        let model = tiny_model();
        let out1 = train(&manifest, &source, &model, &config, None).unwrap();
        let expected_steps = manifest.header.count_b.div_ceil(4);
        assert_eq!(out1.log.len(), expected_steps);

        // same seed, same curves
        let out2 = train(&manifest, &source, &model, &config, None).unwrap();
        let c1: Vec<f64> = out1.log.iter().map(|r| r.l_total).collect();
        let c2: Vec<f64> = out2.log.iter().map(|r| r.l_total).collect();
        assert_eq!(c1, c2);
    }

    #[test]
    fn empty_b_or_n_set_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img: RasterImage<f64> = RasterImage::from_fn(32, 32, |_, _, _| rng.gen_range(0.0..1.0));
        // full-shadow mask: no B, no N
        let images = vec![("x".to_string(), img, ShadowMask::from_fn(32, 32, |_, _| true))];
        let (manifest, source) = patches_from_arrays(&images, 16, 16).unwrap();
        let config = TrainConfig::desk();
        match train::<f64>(&manifest, &source, &tiny_model(), &config, None) {
            Err(Error::Config(_)) => {}
            Err(other) => panic!("expected config error, got {other:?}"),
            Ok(_) => panic!("expected config error, got a trained state"),
        }
    }

    #[test]
    fn every_loss_component_is_logged() {
        let (bs, ns) = synthetic_patches(6, 4);
        let config = TrainConfig::desk();
        let mut state: TrainState<f64> = init_state(&tiny_model(), &config).unwrap();
        let rec = train_step(&mut state, &bs, &ns, 0).unwrap();
        let json = serde_json::to_value(rec).unwrap();
        for key in ["step", "l_mat", "l_sm", "l_bd", "l_adv", "l_total", "d_loss"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert!(rec.l_total.is_finite());
    }

    #[test]
    fn params_stay_in_bounds_after_steps() {
        let (bs, ns) = synthetic_patches(7, 4);
        let config = TrainConfig::desk();
        let mut state: TrainState<f64> = init_state(&tiny_model(), &config).unwrap();
        for _ in 0..5 {
            train_step(&mut state, &bs, &ns, 0).unwrap();
        }
        let p = crate::models::param_net_forward(
            &state.networks,
            &bs[0].patch,
            &bs[0].mask_patch,
            true,
        )
        .unwrap();
        assert!(p.validate().is_ok());
    }
}
