//! Checks shared by the integration tests and the acceptance run. Each
//! returns a one-line summary on success and the first violation otherwise.
#![allow(dead_code)]

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

pub mod gradcheck;
pub mod invariants;
pub mod oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saic_core::model::{InferenceModel, Memory, ModelConfig, ModelParams, SceneFeatures};
use saic_core::nn::Tensor;

pub type Check = Result<String, String>;

pub fn tiny_config(vocab_size: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 8,
        d_ff: 12,
        heads: 2,
        vocab_size,
        rpr_window: 2,
        max_len: 16,
        feature_dim: 3,
    }
}

pub fn random_features(rng: &mut ChaCha8Rng, regions: usize, dim: usize) -> SceneFeatures {
    let data = (0..regions * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    SceneFeatures::new(Tensor::matrix(regions, dim, data).unwrap()).unwrap()
}

/// A randomly initialized model with output logits scaled by `sharpen`, so
/// that its distributions are far from uniform, plus one encoded scene.
pub fn random_instance(seed: u64, vocab_size: usize, layers: usize) -> (InferenceModel<f64>, Memory<f64>) {
    let mut params = ModelParams::init(tiny_config(vocab_size, layers), seed).unwrap();
    let sharpen = 4.0;
    for id in params.store.ids().collect::<Vec<_>>() {
        if params.store.name(id).starts_with("dec.out") {
            for v in params.store.value_mut(id).data_mut() {
                *v *= sharpen;
            }
        }
    }
    let model = InferenceModel::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let regions = rng.random_range(1..=3);
    let mem = model.encode(&random_features(&mut rng, regions, 3)).unwrap();
    (model, mem)
}
