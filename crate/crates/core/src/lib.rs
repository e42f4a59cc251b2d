//! Gated cross-attention vision-language model with dynamic-resolution tiling,
//! built on a small reverse-mode autodiff engine.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod tiling;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamCounts};
pub use params::{Bucket, ParamStore, TrainGroup};
pub use rng::SeedRng;
pub use tensor::Tensor;
