//! Self-describing checkpoint archive: one JSON file holding the three
//! networks' weights, optimizer state, and the full configuration.
//!
//! Weight vectors are stored as base64 of little-endian f64 bytes, so a
//! save/load round trip is exact for both f32 and f64 training.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, Networks};
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorBlob {
    len: usize,
    data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerBlob {
    t: u64,
    m: TensorBlob,
    v: TensorBlob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    model: ModelConfig,
    train: TrainConfig,
    trained_steps: u64,
    param_net: TensorBlob,
    matte_net: TensorBlob,
    d_net: TensorBlob,
    opt_param: OptimizerBlob,
    opt_matte: OptimizerBlob,
    opt_d: OptimizerBlob,
}

/// Everything training mutates: networks, optimizers, and the step counter.
#[derive(Debug, Clone)]
pub struct TrainState<S: Scalar> {
    pub networks: Networks<S>,
    pub config: TrainConfig,
    pub opt_param: Adam<S>,
    pub opt_matte: Adam<S>,
    pub opt_d: Adam<S>,
    pub step: u64,
}

fn encode<S: Scalar>(vals: &[S]) -> TensorBlob {
    let mut bytes = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        bytes.extend_from_slice(&v.f64().to_le_bytes());
    }
    TensorBlob {
        len: vals.len(),
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

fn decode<S: Scalar>(blob: &TensorBlob) -> Result<Vec<S>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&blob.data)
        .map_err(|e| Error::Format(format!("checkpoint blob: {e}")))?;
    if bytes.len() != blob.len * 8 {
        return Err(Error::Format(format!(
            "checkpoint blob length {} does not match {} values",
            bytes.len(),
            blob.len
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| S::c(f64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

fn encode_opt<S: Scalar>(opt: &Adam<S>) -> OptimizerBlob {
    OptimizerBlob {
        t: opt.t,
        m: encode(&opt.m),
        v: encode(&opt.v),
    }
}

fn decode_opt<S: Scalar>(blob: &OptimizerBlob, lr: f64, beta1: f64, beta2: f64) -> Result<Adam<S>> {
    let mut opt = Adam::new(blob.m.len, lr, beta1, beta2);
    opt.t = blob.t;
    opt.m = decode(&blob.m)?;
    opt.v = decode(&blob.v)?;
    Ok(opt)
}

/// Writes the state atomically (temp file + rename).
pub fn save_checkpoint<S: Scalar>(state: &TrainState<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        model: state.networks.config.clone(),
        train: state.config.clone(),
        trained_steps: state.step,
        param_net: encode(&state.networks.param_net.params_flat()),
        matte_net: encode(&state.networks.matte_net.params_flat()),
        d_net: encode(&state.networks.d_net.params_flat()),
        opt_param: encode_opt(&state.opt_param),
        opt_matte: encode_opt(&state.opt_matte),
        opt_d: encode_opt(&state.opt_d),
    };
    let json = serde_json::to_string(&file)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<TrainState<S>> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&json)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    // seed is irrelevant here; weights are overwritten below
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let mut networks: Networks<S> = Networks::new(&mut rng, &file.model)?;
    networks.param_net.set_params_flat(&decode(&file.param_net)?);
    networks.matte_net.set_params_flat(&decode(&file.matte_net)?);
    networks.d_net.set_params_flat(&decode(&file.d_net)?);
    let train = file.train;
    Ok(TrainState {
        opt_param: decode_opt(&file.opt_param, train.lr_param, train.beta1, train.beta2)?,
        opt_matte: decode_opt(&file.opt_matte, train.lr_matte_d, train.beta1, train.beta2)?,
        opt_d: decode_opt(&file.opt_d, train.lr_matte_d, train.beta1, train.beta2)?,
        networks,
        config: train,
        step: file.trained_steps,
    })
}
