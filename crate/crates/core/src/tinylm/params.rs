use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Embedding,
    Query,
    Key,
    Value,
    AttnOut,
    MlpUp,
    MlpDown,
    Head,
}

impl TensorRole {
    pub fn is_attention(self) -> bool {
        matches!(self, TensorRole::Query | TensorRole::Key | TensorRole::Value | TensorRole::AttnOut)
    }
}

/// One parameter matrix inside the flat parameter buffer. Matrices are stored
/// row-major as `(out, in)` so a linear map is `y = x W^T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub role: TensorRole,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Declaration order of every parameter tensor: input embedding, then per
/// layer `wq, wk, wv, wo, w_up, w_down`, then the untied output head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let h = config.mlp_hidden;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, role, layer, rows, cols| {
            tensors.push(TensorInfo { name, role, layer, rows, cols, offset });
            offset += rows * cols;
        };
        push("embedding".into(), TensorRole::Embedding, None, config.vocab_size, d);
        for l in 0..config.layers {
            push(format!("layer{l}.wq"), TensorRole::Query, Some(l), d, d);
            push(format!("layer{l}.wk"), TensorRole::Key, Some(l), d, d);
            push(format!("layer{l}.wv"), TensorRole::Value, Some(l), d, d);
            push(format!("layer{l}.wo"), TensorRole::AttnOut, Some(l), d, d);
            push(format!("layer{l}.w_up"), TensorRole::MlpUp, Some(l), h, d);
            push(format!("layer{l}.w_down"), TensorRole::MlpDown, Some(l), d, h);
        }
        push("head".into(), TensorRole::Head, None, config.vocab_size, d);
        ParamLayout { tensors, total: offset }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn embedding(&self) -> &TensorInfo {
        &self.tensors[0]
    }

    pub fn head(&self) -> &TensorInfo {
        self.tensors.last().expect("layout always has a head")
    }

    /// Tensors of one transformer layer in declaration order.
    pub fn layer(&self, layer: usize) -> &[TensorInfo] {
        let start = 1 + 6 * layer;
        &self.tensors[start..start + 6]
    }

    pub fn view<'a, T>(&self, buf: &'a [T], tensor: &TensorInfo) -> ArrayView2<'a, T> {
        ArrayView2::from_shape((tensor.rows, tensor.cols), &buf[tensor.range()])
            .expect("tensor range matches its shape")
    }

    pub fn view_mut<'a, T>(&self, buf: &'a mut [T], tensor: &TensorInfo) -> ArrayViewMut2<'a, T> {
        ArrayViewMut2::from_shape((tensor.rows, tensor.cols), &mut buf[tensor.range()])
            .expect("tensor range matches its shape")
    }
}

/// Model parameters as one flat float32 buffer laid out by [`ParamLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<f32>,
}

impl ModelState {
    /// Seeded Gaussian initialization. Residual output projections are scaled
    /// down by `1/sqrt(2 * layers)`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0f32; layout.total()];
        let residual_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        for t in layout.tensors() {
            let std = match t.role {
                TensorRole::Embedding => 1.0,
                TensorRole::AttnOut | TensorRole::MlpDown => residual_scale / (t.cols as f64).sqrt(),
                _ => 1.0 / (t.cols as f64).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for p in &mut params[t.range()] {
                *p = normal.sample(&mut rng) as f32;
            }
        }
        Ok(ModelState { config: config.clone(), params })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&p| p as f64).collect()
    }
}
