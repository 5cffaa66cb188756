use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernel::{self, Weights};
use super::{ExampleRecord, ModelConfig, ModelState, OptimizerState, OutputFn, ParamLayout, QWeighting, TrainHyper};
use crate::{Error, Result};

pub struct TrainOutput {
    pub state: ModelState,
    pub optimizer: OptimizerState,
    /// Mean per-token loss of each step's batch.
    pub losses: Vec<f64>,
}

const SHUFFLE_SALT: u64 = 0x7261_696e_5eed;

/// Mean-token-loss gradient of a batch, accumulated in batch order.
pub(crate) fn batch_gradient(state: &ModelState, batch: &[&ExampleRecord]) -> Result<(Vec<f32>, f64, Vec<f64>)> {
    let layout = state.layout();
    let tokens: usize = batch.iter().map(|e| e.target_count()).sum();
    let scale = 1.0 / tokens as f32;
    let per_example: Vec<(Vec<f32>, f64)> = batch
        .par_iter()
        .map(|ex| {
            let weights = Weights::new(&state.config, &layout, &state.params);
            let trace = kernel::forward(&weights, ex.inputs());
            let targets = ex.targets();
            let loss: f64 = targets
                .iter()
                .map(|&(t, tok)| -(kernel::log_prob(&trace.logits, t, tok) as f64))
                .sum();
            let (mut dlogits, _) = kernel::output_gradient(&trace.logits, &targets, OutputFn::Loss, QWeighting::Token);
            dlogits.mapv_inplace(|v| v * scale);
            let mut grads = vec![0f32; layout.total()];
            kernel::backward(&weights, &layout, &trace, &dlogits, &mut grads, true);
            (grads, loss)
        })
        .collect();
    let mut total = vec![0f32; layout.total()];
    let mut losses = Vec::with_capacity(batch.len());
    for (g, loss) in &per_example {
        for (acc, v) in total.iter_mut().zip(g) {
            *acc += v;
        }
        losses.push(*loss);
    }
    let mean = losses.iter().sum::<f64>() / tokens as f64;
    Ok((total, mean, losses))
}

/// Trains from the seeded initialization for `steps` Adafactor updates.
///
/// Batches are drawn by walking seeded shuffles of the corpus. Two runs with
/// the same inputs produce bit-identical states.
pub fn train(config: &ModelConfig, corpus: &[ExampleRecord], steps: usize, hyper: &TrainHyper) -> Result<TrainOutput> {
    config.validate()?;
    hyper.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for ex in corpus {
        ex.validate(config)?;
    }
    let mut state = ModelState::init(config)?;
    let layout = ParamLayout::new(config);
    let mut optimizer = OptimizerState::new(&layout, hyper.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(steps);

    for _ in 0..steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let (grads, mean, per_example) = batch_gradient(&state, &batch)?;
        if let Some(i) = per_example.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss { step: optimizer.step, example: batch[i].id });
        }
        optimizer.update(&layout, &mut state.params, &grads)?;
        losses.push(mean);
    }
    Ok(TrainOutput { state, optimizer, losses })
}

/// One optimizer update on `proponent` alone, starting from the given
/// snapshot. Neither input is modified.
pub fn tail_patch_step(
    state: &ModelState,
    optimizer: &OptimizerState,
    proponent: &ExampleRecord,
    hyper: &TrainHyper,
) -> Result<ModelState> {
    proponent.validate(&state.config)?;
    let layout = state.layout();
    let (grads, _, losses) = batch_gradient(state, &[proponent])?;
    if !losses[0].is_finite() {
        return Err(Error::NonFiniteLoss { step: optimizer.step, example: proponent.id });
    }
    let mut opt = optimizer.clone();
    opt.hyper = hyper.clone();
    let mut next = state.clone();
    opt.update(&layout, &mut next.params, &grads)?;
    Ok(next)
}
