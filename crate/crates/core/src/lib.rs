//! Latent space anchoring for domain-scalable unpaired image translation.
//!
//! One frozen generator prior supplies a shared feature space. Each visual
//! domain gets a lightweight encoder and regressor trained against that
//! space on its own, so domains can be added without touching the others.

pub mod adapters;
pub mod anchoring;
pub mod checkpoint;
pub mod data;
mod error;
pub mod metrics;
pub mod prior;
pub mod registry;
pub mod translation;

pub use anchor_nn::{Scalar, Tensor};
pub use error::{AnchorError, Result};

pub type Prior = prior::GeneratorPrior<f32>;
pub type PriorF64 = prior::GeneratorPrior<f64>;
pub type Adapter = adapters::DomainAdapter<f32>;
pub type AdapterF64 = adapters::DomainAdapter<f64>;
pub type Image = data::DomainImage<f32>;
pub type Dataset = data::DomainDataset<f32>;
