use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureVector, LayerBlockLayout, Stage};
use crate::tinylm::GradientSketch;
use crate::{Error, Result};

/// Two-sided Gaussian projection of every layer block.
///
/// Block `b` of shape `(m, n)` maps `W` to `L_b W R_b^T`, a `k x k` matrix
/// with `k = sqrt(block_dim)`. Entries of `L_b` (`k x m`) and `R_b`
/// (`k x n`) are i.i.d. normal with variance `1/k`, which keeps squared
/// norms unbiased. The matrices are regenerated from `seed`, never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSpec {
    seed: u64,
    block_dim: usize,
    side: usize,
    left: Vec<Array2<f32>>,
    right: Vec<Array2<f32>>,
}

impl ProjectionSpec {
    pub fn new(seed: u64, block_dim: usize, layout: &LayerBlockLayout) -> Result<Self> {
        let side = (block_dim as f64).sqrt().round() as usize;
        if block_dim == 0 || side * side != block_dim {
            return Err(Error::InvalidConfig(format!(
                "projection.block_dim must be a positive perfect square, got {block_dim}"
            )));
        }
        let normal = Normal::new(0.0f64, (1.0 / side as f64).sqrt()).expect("positive std");
        let mut left = Vec::with_capacity(layout.len());
        let mut right = Vec::with_capacity(layout.len());
        for (b, block) in layout.blocks().iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            left.push(Array2::from_shape_simple_fn((side, block.rows), || normal.sample(&mut rng) as f32));
            right.push(Array2::from_shape_simple_fn((side, block.cols), || normal.sample(&mut rng) as f32));
        }
        Ok(ProjectionSpec { seed, block_dim, side, left, right })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn blocks(&self) -> usize {
        self.left.len()
    }

    /// Total projected dimension `d`.
    pub fn dim(&self) -> usize {
        self.block_dim * self.left.len()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        vec![self.block_dim; self.left.len()]
    }

    pub fn left(&self, block: usize) -> &Array2<f32> {
        &self.left[block]
    }

    pub fn right(&self, block: usize) -> &Array2<f32> {
        &self.right[block]
    }

    /// Projects each block and concatenates the row-major results.
    pub fn project(&self, sketch: &GradientSketch) -> Result<FeatureVector> {
        if sketch.blocks.len() != self.left.len() {
            return Err(Error::shape("sketch block count", self.left.len(), sketch.blocks.len()));
        }
        let mut values = Vec::with_capacity(self.dim());
        for (b, w) in sketch.blocks.iter().enumerate() {
            let (l, r) = (&self.left[b], &self.right[b]);
            if w.nrows() != l.ncols() || w.ncols() != r.ncols() {
                return Err(Error::shape(
                    format!("sketch block {b}"),
                    format!("{}x{}", l.ncols(), r.ncols()),
                    format!("{}x{}", w.nrows(), w.ncols()),
                ));
            }
            let out = l.dot(w).dot(&r.t());
            values.extend(out.iter().copied());
        }
        Ok(FeatureVector { example_id: sketch.example_id, stage: Stage::Projected, values })
    }
}
