//! Minimal tensor engine for training small convolutional networks on the CPU.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! `f32` for training and in `f64` when gradients are checked against
//! finite differences.

mod graph;
pub mod layers;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{BatchStats, Graph, Var};
pub use layers::{apply_bn_updates, BatchNorm2d, BnUpdate, Conv2d, Linear, Mode, ModulatedConv2d};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
