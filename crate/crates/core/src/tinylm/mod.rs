//! Desk-scale decoder-only language model.
//!
//! Everything needed by the attribution pipeline lives here: deterministic
//! training with an Adafactor-style optimizer, teacher-forced target
//! probabilities, per-example gradients of a chosen output function and the
//! single-example "tail-patch" update.

mod adafactor;
mod checkpoint;
mod config;
pub(crate) mod kernel;
mod params;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use adafactor::{OptimizerState, SecondMoment};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use config::{ModelConfig, TrainHyper, BOS, EOS, PAD, RESERVED_TOKENS, UNK};
pub use kernel::Real;
pub use params::{ModelState, ParamLayout, TensorInfo, TensorRole};
pub use train::{tail_patch_step, train, TrainOutput};

use crate::gradfeat::LayerBlockLayout;
use crate::{Error, ExampleId, Result};
use kernel::Weights;

/// Function of the target-token probability whose gradient is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFn {
    /// `-log p`
    Loss,
    /// `log(p / (1 - p))`
    Margin,
    /// The raw logit of the target token.
    Logit,
}

impl OutputFn {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputFn::Loss => "loss",
            OutputFn::Margin => "margin",
            OutputFn::Logit => "logit",
        }
    }
}

impl fmt::Display for OutputFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OutputFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss" => Ok(OutputFn::Loss),
            "margin" => Ok(OutputFn::Margin),
            "logit" => Ok(OutputFn::Logit),
            other => Err(Error::InvalidConfig(format!("unknown output function `{other}`"))),
        }
    }
}

/// Where the `Q = dLoss/df` factor is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QWeighting {
    /// Per target token, before summing over tokens.
    Token,
    /// One factor `p_mean - 1` for the whole example.
    ExampleMean,
    /// No factor; the plain sum of output-function gradients.
    Unweighted,
}

/// A token sequence and the positions that contribute to its loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: ExampleId,
    pub token_ids: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl ExampleRecord {
    /// A training passage: every token after the first is a target.
    pub fn passage(id: ExampleId, token_ids: Vec<u32>) -> Self {
        let target_mask = (0..token_ids.len()).map(|i| i > 0).collect();
        ExampleRecord { id, token_ids, target_mask }
    }

    /// A prompt/completion pair where only the completion is scored.
    pub fn completion(id: ExampleId, prompt: &[u32], target: &[u32]) -> Self {
        let mut token_ids = prompt.to_vec();
        token_ids.extend_from_slice(target);
        let mut target_mask = vec![false; prompt.len()];
        target_mask.resize(token_ids.len(), true);
        ExampleRecord { id, token_ids, target_mask }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidExample { id: self.id, reason });
        if self.token_ids.len() != self.target_mask.len() {
            return bad(format!(
                "{} tokens but {} mask entries",
                self.token_ids.len(),
                self.target_mask.len()
            ));
        }
        if self.token_ids.len() > config.seq_len_max {
            return bad(format!("length {} exceeds seq_len_max {}", self.token_ids.len(), config.seq_len_max));
        }
        if let Some(&t) = self.token_ids.iter().find(|&&t| t as usize >= config.vocab_size) {
            return bad(format!("token id {t} outside vocabulary of {}", config.vocab_size));
        }
        if !self.target_mask.iter().skip(1).any(|&m| m) {
            return bad("no target tokens after the first position".into());
        }
        Ok(())
    }

    /// `(logit row, token)` for each scored token.
    pub(crate) fn targets(&self) -> Vec<(usize, u32)> {
        (1..self.token_ids.len())
            .filter(|&i| self.target_mask[i])
            .map(|i| (i - 1, self.token_ids[i]))
            .collect()
    }

    pub(crate) fn inputs(&self) -> &[u32] {
        &self.token_ids[..self.token_ids.len() - 1]
    }

    pub fn target_count(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

/// Summed target loss `sum -log p` at arbitrary precision.
pub fn example_loss<T: Real>(config: &ModelConfig, params: &[T], example: &ExampleRecord) -> Result<T> {
    example.validate(config)?;
    let layout = ParamLayout::new(config);
    let weights = Weights::new(config, &layout, params);
    let trace = kernel::forward(&weights, example.inputs());
    Ok(example
        .targets()
        .iter()
        .fold(T::zero(), |acc, &(t, tok)| acc - kernel::log_prob(&trace.logits, t, tok)))
}

/// Flat gradient of `sum_t Q_t f(token_t)` with respect to every parameter.
///
/// Returns the gradient buffer (laid out like the parameters) and the
/// probability of each target token. The input-embedding slice is left at
/// zero unless `want_embedding` is set.
pub fn example_gradient<T: Real>(
    config: &ModelConfig,
    params: &[T],
    example: &ExampleRecord,
    output_fn: OutputFn,
    weighting: QWeighting,
    want_embedding: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    example.validate(config)?;
    let layout = ParamLayout::new(config);
    let weights = Weights::new(config, &layout, params);
    let trace = kernel::forward(&weights, example.inputs());
    let (dlogits, probs) = kernel::output_gradient(&trace.logits, &example.targets(), output_fn, weighting);
    let mut grads = vec![T::zero(); layout.total()];
    kernel::backward(&weights, &layout, &trace, &dlogits, &mut grads, want_embedding);
    Ok((grads, probs))
}

/// Product of teacher-forced probabilities of `target` after `prompt`.
pub fn target_probability(state: &ModelState, prompt: &[u32], target: &[u32]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Empty("target sequence"));
    }
    if prompt.is_empty() {
        return Err(Error::Empty("prompt (must contain at least the BOS token)"));
    }
    let example = ExampleRecord::completion(ExampleId(u64::MAX), prompt, target);
    Ok(sequence_log_prob(state, &example)?.exp())
}

/// `sum log p` over the scored tokens of `example`.
pub fn sequence_log_prob(state: &ModelState, example: &ExampleRecord) -> Result<f64> {
    example.validate(&state.config)?;
    let layout = state.layout();
    let weights = Weights::new(&state.config, &layout, &state.params);
    let trace = kernel::forward(&weights, example.inputs());
    Ok(example
        .targets()
        .iter()
        .map(|&(t, tok)| kernel::log_prob(&trace.logits, t, tok) as f64)
        .sum())
}

/// Mean probability of the scored tokens.
pub fn mean_target_probability(state: &ModelState, example: &ExampleRecord) -> Result<f64> {
    example.validate(&state.config)?;
    let layout = state.layout();
    let weights = Weights::new(&state.config, &layout, &state.params);
    let trace = kernel::forward(&weights, example.inputs());
    let targets = example.targets();
    let sum: f64 = targets
        .iter()
        .map(|&(t, tok)| (kernel::log_prob(&trace.logits, t, tok) as f64).exp())
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Greedy continuation of `prompt`, stopping after `max_new` tokens or at
/// the first token in `stop` (which is not included).
pub fn greedy_decode(state: &ModelState, prompt: &[u32], max_new: usize, stop: &[u32]) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    let layout = state.layout();
    let weights = Weights::new(&state.config, &layout, &state.params);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < state.config.seq_len_max {
        let trace = kernel::forward(&weights, &seq);
        let row = trace.logits.row(seq.len() - 1);
        let next = row
            .iter()
            .enumerate()
            .skip(RESERVED_TOKENS)
            .chain(std::iter::once((EOS as usize, &row[EOS as usize])))
            .fold((EOS as usize, f32::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 || (v == best.1 && i < best.0) {
                    (i, v)
                } else {
                    best
                }
            })
            .0 as u32;
        if stop.contains(&next) || next == EOS {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Per-layer-block loss-gradient matrices for one example. The input token
/// embedding is never part of a sketch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSketch {
    pub example_id: ExampleId,
    pub output_fn: OutputFn,
    pub blocks: Vec<Array2<f32>>,
}

impl GradientSketch {
    pub fn squared_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum()
    }

    /// Exact inner product of two sketches over all block entries.
    pub fn dot(&self, other: &GradientSketch) -> f64 {
        self.blocks
            .iter()
            .zip(&other.blocks)
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    }
}

/// Gradient sketch with token-level `Q` (the default weighting).
pub fn per_example_gradient(
    state: &ModelState,
    example: &ExampleRecord,
    output_fn: OutputFn,
    blocks: &LayerBlockLayout,
) -> Result<GradientSketch> {
    gradient_sketch(state, example, output_fn, QWeighting::Token, blocks).map(|(s, _)| s)
}

/// Gradient sketch under an explicit `Q` weighting. Also returns the mean
/// target-token probability of the example.
pub fn gradient_sketch(
    state: &ModelState,
    example: &ExampleRecord,
    output_fn: OutputFn,
    weighting: QWeighting,
    blocks: &LayerBlockLayout,
) -> Result<(GradientSketch, f64)> {
    let (flat, probs) = example_gradient(&state.config, &state.params, example, output_fn, weighting, false)?;
    let layout = state.layout();
    let matrices = blocks.gather(&layout, &flat)?;
    for (b, m) in blocks.blocks().iter().zip(&matrices) {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: b.name.clone() });
        }
    }
    let mean_p = probs.iter().map(|&p| p as f64).sum::<f64>() / probs.len() as f64;
    Ok((
        GradientSketch {
            example_id: example.id,
            output_fn,
            blocks: matrices,
        },
        mean_p,
    ))
}
