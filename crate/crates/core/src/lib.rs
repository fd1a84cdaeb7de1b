//! Semi-autoregressive caption generation.
//!
//! An autoregressive *outliner* emits the first word of every group of `k`
//! words, then a non-autoregressive *filler* predicts the remaining words of
//! every group in a single parallel pass. Both stages run on one shared
//! transformer decoder and differ only in attention mask and input layout.
//!
//! The crate also carries the baselines (autoregressive beam search, one-shot
//! parallel decoding and mask-predict refinement), the fine-tuning recipe
//! (curriculum over group size, hybrid distillation), a synthetic captioning
//! task with BLEU evaluation, the hypothesis-masking experiment, and the
//! analytical/wall-clock cost comparison.

pub mod bench;
pub mod dataset;
pub mod decoding;
pub mod error;
pub mod experiment;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod taskgen;
pub mod tokens;
pub mod training;

pub use error::{Error, Result};
