//! Weakly-supervised shadow removal from shadow images and their masks alone.
//!
//! The pipeline crops shadow images into overlapping patches, splits them
//! into non-shadow / boundary / full-shadow sets by mask content, and trains
//! a patch-based remover adversarially: a parameter network predicts
//! per-channel affine relighting factors, a matte network predicts the
//! blending layer that confines the relighting to shadow pixels, and a small
//! convolutional critic supplies the training signal by judging composed
//! outputs against real non-shadow patches. Physics constraints (bounded
//! relighting parameters, matte targets derived from penumbra geometry, a
//! boundary color-consistency penalty) keep the adversarial problem
//! well-posed. Full images are restored by aggregating patch estimates with
//! critic-score weights; evaluation reports RMSE in CIE L*a*b*, with a
//! max/min pseudo-ground-truth protocol for static-camera videos.
//!
//! All numeric code is generic over the scalar type ([`Scalar`]); `f32` is
//! the practical training precision and `f64` backs the oracle tests.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod models;
pub mod nn;
pub mod patches;
pub mod physics;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f32 aliases: the precision the CLI trains and infers in.
pub type RasterImage32 = imaging::RasterImage<f32>;
pub type LabImage32 = imaging::LabImage<f32>;
pub type ShadowParams32 = physics::ShadowParams<f32>;
pub type MatteLayer32 = physics::MatteLayer<f32>;

/// f64 aliases for oracle tests and high-precision evaluation.
pub type RasterImage64 = imaging::RasterImage<f64>;
pub type LabImage64 = imaging::LabImage<f64>;
pub type ShadowParams64 = physics::ShadowParams<f64>;
pub type MatteLayer64 = physics::MatteLayer<f64>;
