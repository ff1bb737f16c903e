//! Latent-graph GFlowNet sampler: a set-valued policy over graph edges,
//! a recurrent graph decoder that turns sampled edge sets into conditions,
//! and a small conditional diffusion model whose denoising error acts as reward.

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod params;
pub mod policy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
