//! Shared inputs for the benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nowcast_core::model::ModelConfig;
use nowcast_core::nn::Tensor;

/// Desk-scale network used by the latency benchmarks.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        hid_spatial: 16,
        hid_temporal: 64,
        ..ModelConfig::default()
    }
}

pub fn random_frames(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>()).collect())
}

pub fn random_raw(shape: (usize, usize, usize), seed: u64) -> Array3<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.random())
}
