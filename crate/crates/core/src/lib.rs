//! Night-time single-object tracking on a small CPU tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`nn`], [`autograd`], [`params`], [`optim`]: a dense `f32`
//!   tensor type, the primitives the models need, reverse-mode gradients,
//!   named parameter stores with a bit-exact weights format, and AdamW.
//! - [`ssm`]: selective state-space scans (sequential and associative) and
//!   mamba blocks.
//! - [`mlle`]: Retinex-style low-light enhancement (illumination estimator
//!   plus a U-shaped damage restorer built from illumination-modulated SSM
//!   blocks).
//! - [`vltrack`]: crop geometry, visual/language encoders, cross-modal
//!   fusion, the center-based head and the per-sequence tracking loop.
//! - [`losses`], [`metrics`]: training objectives and OTB-style evaluation.
//! - [`synth`]: deterministic synthetic images and sequences for tests.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod bbox;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod mlle;
pub mod nn;
pub mod optim;
pub mod params;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod vltrack;

pub use autograd::{grad_of, Gradients, Var};
pub use bbox::BBox;
pub use error::{Error, Result, WeightsError};
pub use metrics::EvalReport;
pub use mlle::{Enhancer, EnhancerConfig};
pub use optim::AdamW;
pub use params::{ParamStore, Params};
pub use tensor::Tensor;
pub use vltrack::{Tracker, TrackerConfig};
