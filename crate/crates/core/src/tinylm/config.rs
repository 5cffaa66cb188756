use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED_TOKENS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub heads: usize,
    pub seq_len_max: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 512,
            layers: 2,
            embed_dim: 64,
            mlp_hidden: 256,
            heads: 2,
            seq_len_max: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("heads", self.heads),
            ("seq_len_max", self.seq_len_max),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("model.{name} must be at least 1")));
            }
        }
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::InvalidConfig(format!(
                "model.vocab_size must be at least {RESERVED_TOKENS} (pad/bos/eos/unk), got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model.embed_dim ({}) must be divisible by model.heads ({})",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Adafactor and schedule settings shared by training and tail-patching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    /// Row/column factored second moments for matrices. When false every
    /// parameter keeps its own accumulator.
    pub factored: bool,
    /// Second-moment decay is `1 - t^(-decay_exponent)`.
    pub decay_exponent: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Scale each update by the RMS of the parameter tensor.
    pub scale_by_param_rms: bool,
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.01,
            warmup_steps: 100,
            batch_size: 16,
            factored: true,
            decay_exponent: 0.8,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            scale_by_param_rms: true,
            weight_decay: 0.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("train.learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("train.batch_size must be at least 1".into()));
        }
        if self.clip_threshold <= 0.0 || self.decay_exponent <= 0.0 {
            return Err(Error::InvalidConfig(
                "train.clip_threshold and train.decay_exponent must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("train.weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Linear warmup followed by inverse square root decay. `step` is 1-based.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let t = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        self.learning_rate * (t / w).min(1.0) * (w / t.max(w)).sqrt()
    }
}
