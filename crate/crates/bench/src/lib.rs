//! Shared fixtures for the benchmarks.

use imhd_core::data::{make_synthetic_dataset, DatasetKind, SizeRange, TrainSample};
use imhd_core::{Model, ModelConfig, SeedRng, Tensor};

pub fn toy_model(seed: u64) -> Model {
    Model::new(ModelConfig::default(), seed).expect("default config is valid")
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = SeedRng::new(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.normal(1.0))
}

pub fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = SeedRng::new(seed);
    Tensor::from_fn(&[3, h, w], |_| rng.uniform())
}

pub fn caption_sample(seed: u64) -> TrainSample {
    make_synthetic_dataset(DatasetKind::Caption, 1, SizeRange::fixed(32), &SeedRng::new(seed))
        .expect("one sample")
        .remove(0)
}
