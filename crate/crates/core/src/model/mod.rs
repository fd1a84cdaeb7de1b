//! Transformer encoder-decoder with relative-position self-attention.
//!
//! One decoder parameterization plays both roles: run under a causal mask
//! over the leader subsequence it is the outliner, run under a full mask over
//! the `[mask]`-expanded sequence it is the filler. The decoder has no
//! absolute position encoding; relative offsets clamped to `[-w, w]` are the
//! only positional signal, which lets the compressed and the expanded
//! sequence share one mechanism. The encoder treats image regions as a set.

mod checkpoint;
mod config;
mod graph;
mod infer;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, OptimizerState};
pub use config::ModelConfig;
pub use graph::{decoder_logits_graph, encode_graph};
pub use infer::InferenceModel;
pub use params::{ModelIds, ModelParams};

use crate::error::{dim_err, Result};
use crate::nn::{Scalar, Tensor};

/// Region feature vectors standing in for an image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFeatures {
    pub vectors: Tensor<f64>,
}

impl SceneFeatures {
    pub fn new(vectors: Tensor<f64>) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return dim_err("scene features must be a regions × features matrix");
        }
        if !vectors.is_finite() {
            return dim_err("scene features must be finite");
        }
        Ok(Self { vectors })
    }

    pub fn regions(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Encoder output consumed by decoder cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory<T: Scalar = f32> {
    encoded: Tensor<T>,
}

impl<T: Scalar> Memory<T> {
    pub(crate) fn new(encoded: Tensor<T>) -> Self {
        Self { encoded }
    }

    pub fn encoded(&self) -> &Tensor<T> {
        &self.encoded
    }
}

/// Clamped relative offsets `min(w, max(-w, j - i))` for every key `j < n`.
pub fn rpr_offsets(i: usize, n: usize, w: usize) -> Vec<i64> {
    let w = w as i64;
    (0..n as i64).map(|j| (j - i as i64).clamp(-w, w)).collect()
}
