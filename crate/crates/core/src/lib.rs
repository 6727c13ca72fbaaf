//! Multimodal multi-task network for assistive driving: state-space temporal
//! feature extraction over multi-view image sequences, a 3D-CNN joint branch,
//! task-gated multimodal fusion and four classification heads, built on a
//! small tape-based autodiff engine.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! pin the double-precision types used for training and verification.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod joints;
pub mod kernels;
pub mod mgmi;
pub mod model;
pub mod mts;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Activation, BnMode, ConvKind, Gradients, PoolKind, RunningStats, Tape, Var};
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
