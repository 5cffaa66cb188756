use ndarray::Array2;
use rayon::prelude::*;

use super::params::{ParamLayout, TensorInfo};
use super::TrainHyper;
use crate::{Error, Result};

/// Second-moment accumulator of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondMoment {
    /// Row means and column means of the squared gradient; the per-entry
    /// estimate is `row[i] * col[j] / mean(row)`.
    Factored { row: Vec<f32>, col: Vec<f32> },
    Full(Vec<f32>),
}

/// Adafactor (no first moment) with update clipping and optional
/// parameter-scale step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub hyper: TrainHyper,
    pub moments: Vec<SecondMoment>,
}

impl OptimizerState {
    pub fn new(layout: &ParamLayout, hyper: TrainHyper) -> Self {
        let moments = layout
            .tensors()
            .iter()
            .map(|t| {
                if hyper.factored {
                    SecondMoment::Factored { row: vec![0.0; t.rows], col: vec![0.0; t.cols] }
                } else {
                    SecondMoment::Full(vec![0.0; t.len()])
                }
            })
            .collect();
        OptimizerState { step: 0, hyper, moments }
    }

    /// Reconstructed per-entry second moment of one tensor.
    pub fn second_moment(&self, tensor: &TensorInfo, index: usize) -> Array2<f32> {
        match &self.moments[index] {
            SecondMoment::Full(v) => Array2::from_shape_vec((tensor.rows, tensor.cols), v.clone())
                .expect("moment shape matches tensor"),
            SecondMoment::Factored { row, col } => {
                let mean_row = row.iter().map(|&r| r as f64).sum::<f64>() / row.len() as f64;
                Array2::from_shape_fn((tensor.rows, tensor.cols), |(i, j)| {
                    if mean_row > 0.0 {
                        (row[i] as f64 * col[j] as f64 / mean_row) as f32
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// Flat per-parameter second moments laid out like the parameters.
    pub fn per_parameter(&self, layout: &ParamLayout) -> Vec<f32> {
        let mut out = vec![0f32; layout.total()];
        for (i, t) in layout.tensors().iter().enumerate() {
            let v = self.second_moment(t, i);
            out[t.range()].copy_from_slice(v.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn check_layout(&self, layout: &ParamLayout) -> Result<()> {
        let ok = self.moments.len() == layout.tensors().len()
            && self.moments.iter().zip(layout.tensors()).all(|(m, t)| match m {
                SecondMoment::Full(v) => v.len() == t.len(),
                SecondMoment::Factored { row, col } => row.len() == t.rows && col.len() == t.cols,
            });
        if ok {
            Ok(())
        } else {
            Err(Error::LayoutMismatch("optimizer state does not match the model layout".into()))
        }
    }

    /// Applies one update with gradient `grads` (flat, parameter layout).
    pub fn update(&mut self, layout: &ParamLayout, params: &mut [f32], grads: &[f32]) -> Result<()> {
        self.check_layout(layout)?;
        self.step += 1;
        let t = self.step as f64;
        let hyper = &self.hyper;
        let beta = 1.0 - t.powf(-hyper.decay_exponent);
        let lr = hyper.learning_rate_at(self.step);

        let mut slices: Vec<&mut [f32]> = Vec::with_capacity(layout.tensors().len());
        let mut rest = params;
        for info in layout.tensors() {
            let (head, tail) = rest.split_at_mut(info.len());
            slices.push(head);
            rest = tail;
        }
        layout
            .tensors()
            .par_iter()
            .zip(slices)
            .zip(self.moments.par_iter_mut())
            .try_for_each(|((info, p), moment)| {
                let g = &grads[info.range()];
                update_tensor(info, p, g, moment, beta, lr, hyper)
            })
    }
}

fn rms(v: &[f32]) -> f64 {
    (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

fn update_tensor(
    info: &TensorInfo,
    params: &mut [f32],
    grads: &[f32],
    moment: &mut SecondMoment,
    beta: f64,
    lr: f64,
    hyper: &TrainHyper,
) -> Result<()> {
    let (rows, cols) = (info.rows, info.cols);
    let sq = |i: usize| (grads[i] as f64) * (grads[i] as f64) + hyper.eps1;
    let mut update = vec![0f64; rows * cols];
    match moment {
        SecondMoment::Full(v) => {
            for i in 0..v.len() {
                let vi = beta * v[i] as f64 + (1.0 - beta) * sq(i);
                v[i] = vi as f32;
                update[i] = grads[i] as f64 / (v[i] as f64).sqrt();
            }
        }
        SecondMoment::Factored { row, col } => {
            let mut row_mean = vec![0f64; rows];
            let mut col_mean = vec![0f64; cols];
            for r in 0..rows {
                for c in 0..cols {
                    let s = sq(r * cols + c);
                    row_mean[r] += s;
                    col_mean[c] += s;
                }
            }
            for (acc, m) in row.iter_mut().zip(&row_mean) {
                *acc = (beta * *acc as f64 + (1.0 - beta) * m / cols as f64) as f32;
            }
            for (acc, m) in col.iter_mut().zip(&col_mean) {
                *acc = (beta * *acc as f64 + (1.0 - beta) * m / rows as f64) as f32;
            }
            let mean_row = row.iter().map(|&r| r as f64).sum::<f64>() / rows as f64;
            for r in 0..rows {
                for c in 0..cols {
                    let v = row[r] as f64 * col[c] as f64 / mean_row;
                    update[r * cols + c] = grads[r * cols + c] as f64 / v.sqrt();
                }
            }
        }
    }
    let rms_update = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
    let clip = (rms_update / hyper.clip_threshold).max(1.0);
    let scale = if hyper.scale_by_param_rms { rms(params).max(hyper.eps2) } else { 1.0 };
    let alpha = lr * scale / clip;
    let decay = lr * hyper.weight_decay;
    for (p, u) in params.iter_mut().zip(&update) {
        let next = *p as f64 - alpha * u - decay * *p as f64;
        if !next.is_finite() {
            return Err(Error::NonFiniteUpdate { tensor: info.name.clone() });
        }
        *p = next as f32;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;

    fn small() -> (ModelConfig, ParamLayout) {
        let cfg = ModelConfig { vocab_size: 8, layers: 1, embed_dim: 4, mlp_hidden: 8, heads: 2, ..Default::default() };
        let layout = ParamLayout::new(&cfg);
        (cfg, layout)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (_, layout) = small();
        let mut opt = OptimizerState::new(&layout, TrainHyper::default());
        let mut params: Vec<f32> = (0..layout.total()).map(|i| (i as f32).sin()).collect();
        let before = params.clone();
        opt.update(&layout, &mut params, &vec![0.0; layout.total()]).unwrap();
        assert_eq!(params, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn weight_decay_moves_parameters_even_without_gradient() {
        let (_, layout) = small();
        let hyper = TrainHyper { weight_decay: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(&layout, hyper);
        let mut params = vec![1.0f32; layout.total()];
        opt.update(&layout, &mut params, &vec![0.0; layout.total()]).unwrap();
        assert!(params.iter().all(|&p| p < 1.0));
    }

    #[test]
    fn factored_moment_matches_full_for_rank_one_squares() {
        // With beta = 0 on the first step both accumulators hold g^2 exactly
        // when g^2 is an outer product.
        let (_, layout) = small();
        let grads: Vec<f32> = layout
            .tensors()
            .iter()
            .flat_map(|t| (0..t.len()).map(move |k| ((k / t.cols) as f32 + 1.0) * ((k % t.cols) as f32 + 2.0)))
            .collect();
        let mut p1 = vec![0.5f32; layout.total()];
        let mut p2 = p1.clone();
        let mut fact = OptimizerState::new(&layout, TrainHyper { eps1: 0.0, ..Default::default() });
        let mut full = OptimizerState::new(&layout, TrainHyper { factored: false, eps1: 0.0, ..Default::default() });
        fact.update(&layout, &mut p1, &grads).unwrap();
        full.update(&layout, &mut p2, &grads).unwrap();
        let (vf, vu) = (fact.per_parameter(&layout), full.per_parameter(&layout));
        for (a, b) in vf.iter().zip(&vu) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(vf.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn learning_rate_schedule_warms_up_then_decays() {
        let h = TrainHyper { learning_rate: 1.0, warmup_steps: 4, ..Default::default() };
        assert!((h.learning_rate_at(1) - 0.25).abs() < 1e-12);
        assert!((h.learning_rate_at(4) - 1.0).abs() < 1e-12);
        assert!((h.learning_rate_at(16) - 0.5).abs() < 1e-12);
    }
}
