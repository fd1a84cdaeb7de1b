use crate::error::{contract, Result};

/// Architecture hyper-parameters. Encoder and decoder use the same depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Relative-position clipping window `w`.
    pub rpr_window: usize,
    /// Longest decoder input the model is used with.
    pub max_len: usize,
    /// Width of one region feature vector.
    pub feature_dim: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary and feature width.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            layers: 2,
            d_model: 64,
            d_ff: 128,
            heads: 4,
            vocab_size,
            rpr_window: 4,
            max_len: 32,
            feature_dim,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return contract("layers, d_model, d_ff and heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return contract(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.rpr_window == 0 {
            return contract("relative-position window must be at least 1");
        }
        if self.vocab_size <= crate::tokens::FIRST_WORD as usize {
            return contract("vocabulary has no ordinary words");
        }
        if self.feature_dim == 0 || self.max_len == 0 {
            return contract("feature_dim and max_len must be positive");
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order, as used in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("rpr_window", self.rpr_window),
            ("max_len", self.max_len),
            ("feature_dim", self.feature_dim),
        ]
    }

    pub fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "layers" => &mut self.layers,
            "d_model" => &mut self.d_model,
            "d_ff" => &mut self.d_ff,
            "heads" => &mut self.heads,
            "vocab_size" => &mut self.vocab_size,
            "rpr_window" => &mut self.rpr_window,
            "max_len" => &mut self.max_len,
            "feature_dim" => &mut self.feature_dim,
            _ => return false,
        };
        *slot = value;
        true
    }
}
