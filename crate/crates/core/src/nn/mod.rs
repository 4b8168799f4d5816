//! From-scratch multilayer perceptron over fused embedding features.
//!
//! Hidden layers are `affine -> ReLU -> inverted dropout`; the output layer
//! is affine only and feeds a softmax cross-entropy loss. Parameters are
//! generic over [`Scalar`] so the same code runs in `f32` for training and
//! in `f64` for finite-difference gradient checks.

mod adam;
mod checkpoint;
mod model;

pub use adam::{adam_step, AdamConfig, AdamState, WeightDecayMode};
pub use checkpoint::{read_mlp1, write_mlp1, MLP1_MAGIC, MLP1_VERSION};
pub use model::{
    backward, forward, init_model, predict, softmax_cross_entropy, ForwardCache, Gradients,
    LayerParams, MlpModel,
};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use thiserror::Error;

use crate::codec::CodecError;

/// Floating-point element type for model parameters.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + AddAssign
    + MulAssign
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + Default
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("model dimensions must be at least 1 (got {0})")]
    ZeroDim(&'static str),
    #[error("layer shapes do not chain: layer {layer} expects {expected} inputs, previous layer emits {found}")]
    BrokenChain { layer: usize, expected: usize, found: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: u16, classes: usize },
    #[error("label count {labels} does not match batch size {rows}")]
    LabelCount { labels: usize, rows: usize },
    #[error("forward cache does not belong to the current model state")]
    StaleCache,
    #[error("parameter shape mismatch in layer {0}")]
    ShapeMismatch(usize),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("checkpoint: {0}")]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
