//! Spatial Gram alignment for latent generative models: alignment losses,
//! numerical certification of their structural properties, and a toy
//! two-stage VAE/rectified-flow training pipeline, all on a deterministic
//! dependency-free numerics substrate.

pub mod alignment;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod linalg;
pub mod optim;
pub mod prior;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod vae;

pub use error::{Result, SgaError};
pub use rng::RngState;
pub use tensor::Tensor;
