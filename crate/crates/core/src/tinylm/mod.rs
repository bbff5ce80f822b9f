//! Byte-level single-block transformer classifier with LoRA adapters.
//!
//! ```text
//! tokens -> embedding -> self-attention (LoRA on W_q / W_v) -> +residual
//!        -> FFN (GELU) -> +residual -> mean-pool -> linear head -> softmax
//! ```
//!
//! Everything is `f64`. Gradients are written out by hand in [`model`].

mod lora;
mod matrix;
pub mod model;
mod optim;
mod weights;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use lora::{lora_merge, LoraAdapter, LoraPair};
pub use matrix::Matrix;
pub use model::{forward, loss_and_grad, DropoutMode, Example, Gradients, Model, Trainable};
pub use optim::{apply_update, global_norm, Direction, DEFAULT_CLIP};
pub use weights::Weights;

pub const VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("adapter-only training needs an adapter")]
    NoAdapter,
    #[error("malformed model bytes: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: VOCAB,
            d_model: 16,
            d_ff: 32,
            max_len: 64,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [self.vocab, self.d_model, self.d_ff, self.max_len, self.n_classes];
        if dims.iter().any(|&d| d == 0) {
            return Err(ModelError::InvalidConfig("all dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    #[serde(rename = "q")]
    Query,
    #[serde(rename = "v")]
    Value,
}

/// Adapter hyperparameters: rank, scaling numerator, input dropout, targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    #[serde(default = "default_targets")]
    pub targets: BTreeSet<LoraTarget>,
}

fn default_targets() -> BTreeSet<LoraTarget> {
    [LoraTarget::Query, LoraTarget::Value].into_iter().collect()
}

impl LoraConfig {
    pub fn new(r: usize, alpha: f64, dropout: f64) -> Self {
        LoraConfig {
            r,
            alpha,
            dropout,
            targets: default_targets(),
        }
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    pub fn validate(&self, d_model: usize) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.r == 0 || self.r > d_model {
            return bad(format!("rank {} must be in 1..={d_model}", self.r));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be positive", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        if self.targets.is_empty() {
            return bad("adapter needs at least one target".into());
        }
        Ok(())
    }
}

/// Byte-level tokenization: the UTF-8 bytes of `text`, truncated to `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Vec<u32> {
    text.as_bytes().iter().take(max_len).map(|&b| u32::from(b)).collect()
}
