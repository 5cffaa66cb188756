//! Block-diagonal Gauss-Newton approximation `R = mean(phi phi^T)` over
//! projected gradients, its inverse square root, and the train/eval mix.

mod io;

use nalgebra::DMatrix;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use io::{read_hessian, write_hessian};

use crate::gradfeat::{FeatureVector, Stage};
use crate::{Error, Result};

/// Which gradients an autocorrelation was estimated from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Source {
    Train,
    Eval,
    Mixed { lambda: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub source: Source,
    pub crossover_rank: u32,
    pub train_count: u64,
    pub eval_count: u64,
    pub projection_seed: u64,
    pub tag: [u8; 16],
}

impl Provenance {
    fn new(source: Source, count: u64) -> Self {
        let (train_count, eval_count) = match source {
            Source::Eval => (0, count),
            _ => (count, 0),
        };
        Provenance { source, crossover_rank: 0, train_count, eval_count, projection_seed: 0, tag: [0; 16] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlock {
    pub r: Array2<f64>,
    pub count: u64,
    pub inv_sqrt: Option<Array2<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    pub blocks: Vec<HessianBlock>,
    pub provenance: Provenance,
}

/// Streaming sums of outer products. Merging partial accumulators is exact
/// up to float64 round-off, so shards may be processed in any order.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    dims: Vec<usize>,
    sums: Vec<Array2<f64>>,
    count: u64,
}

const CHUNK: usize = 256;

impl HessianAccumulator {
    pub fn new(block_dims: &[usize]) -> Self {
        HessianAccumulator {
            dims: block_dims.to_vec(),
            sums: block_dims.iter().map(|&d| Array2::zeros((d, d))).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds projected (not whitened, not normalized) vectors.
    pub fn push_all<'a>(&mut self, vectors: impl IntoIterator<Item = &'a FeatureVector>) -> Result<()> {
        let total: usize = self.dims.iter().sum();
        let mut chunk: Vec<&FeatureVector> = Vec::with_capacity(CHUNK);
        for v in vectors {
            v.require_stage(Stage::Projected)?;
            if v.values.len() != total {
                return Err(Error::shape("feature dimension", total, v.values.len()));
            }
            chunk.push(v);
            if chunk.len() == CHUNK {
                self.absorb(&chunk);
                chunk.clear();
            }
        }
        if !chunk.is_empty() {
            self.absorb(&chunk);
        }
        Ok(())
    }

    fn absorb(&mut self, chunk: &[&FeatureVector]) {
        let mut start = 0;
        let offsets: Vec<usize> = self
            .dims
            .iter()
            .map(|&d| {
                let o = start;
                start += d;
                o
            })
            .collect();
        self.sums
            .par_iter_mut()
            .zip(self.dims.par_iter().zip(offsets))
            .for_each(|(sum, (&d, offset))| {
                let phi = Array2::from_shape_fn((chunk.len(), d), |(i, j)| chunk[i].values[offset + j] as f64);
                general_mat_mul(1.0, &phi.t(), &phi, 1.0, sum);
            });
        self.count += chunk.len() as u64;
    }

    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::LayoutMismatch(format!("block dims {:?} vs {:?}", self.dims, other.dims)));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// Mean outer product per block.
    pub fn finish(&self, source: Source) -> Result<HessianBlocks> {
        if self.count == 0 {
            return Err(Error::Empty("feature stream"));
        }
        let n = self.count as f64;
        let blocks = self
            .sums
            .iter()
            .map(|sum| {
                let mut r = sum / n;
                symmetrize(&mut r);
                HessianBlock { r, count: self.count, inv_sqrt: None }
            })
            .collect();
        Ok(HessianBlocks { blocks, provenance: Provenance::new(source, self.count) })
    }
}

fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// `R_b = (1/n) sum phi_b phi_b^T` for every block of the given vectors.
pub fn estimate_r<'a>(vectors: impl IntoIterator<Item = &'a FeatureVector>, block_dims: &[usize], source: Source) -> Result<HessianBlocks> {
    let mut acc = HessianAccumulator::new(block_dims);
    acc.push_all(vectors)?;
    acc.finish(source)
}

/// Relative asymmetry tolerated by [`HessianBlocks::inverse_sqrt`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

fn to_nalgebra(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Eigenvalues of a symmetric block, in descending order.
fn eigenvalues(r: &Array2<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = to_nalgebra(r).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

impl HessianBlocks {
    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.r.nrows()).collect()
    }

    pub fn dim(&self) -> usize {
        self.block_dims().iter().sum()
    }

    /// Rounds every stored matrix to float32, the precision of the file
    /// format, so in-memory results match a write/read round trip.
    pub fn to_stored_precision(&self) -> HessianBlocks {
        let round = |m: &Array2<f64>| m.mapv(|v| v as f32 as f64);
        HessianBlocks {
            blocks: self
                .blocks
                .iter()
                .map(|b| HessianBlock { r: round(&b.r), count: b.count, inv_sqrt: b.inv_sqrt.as_ref().map(round) })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn has_inverse_sqrt(&self) -> bool {
        self.blocks.iter().all(|b| b.inv_sqrt.is_some())
    }

    /// Largest absolute asymmetry `max |R - R^T|` of each block.
    pub fn asymmetry(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .map(|b| {
                let r = &b.r;
                (0..r.nrows())
                    .flat_map(|i| (0..r.ncols()).map(move |j| (r[[i, j]] - r[[j, i]]).abs()))
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Computes `R^-1/2` per block from its eigendecomposition, flooring
    /// eigenvalues at `damping * trace / d_b`.
    pub fn inverse_sqrt(&self, damping: f64) -> Result<HessianBlocks> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::InvalidConfig(format!("hessian damping must be finite and >= 0, got {damping}")));
        }
        for (b, (block, asym)) in self.blocks.iter().zip(self.asymmetry()).enumerate() {
            let scale = block.r.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            if asym > SYMMETRY_TOLERANCE * scale {
                return Err(Error::NotSymmetric { block: b, asymmetry: asym });
            }
        }
        let inverses: Vec<Result<Array2<f64>>> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(b, block)| {
                let d = block.r.nrows();
                let trace: f64 = block.r.diag().sum();
                let floor = damping * trace / d as f64;
                let eig = to_nalgebra(&block.r).symmetric_eigen();
                let mut scaled = eig.eigenvectors.clone();
                for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
                    let lambda = lambda.max(floor);
                    if lambda <= 0.0 || !lambda.is_finite() {
                        return Err(Error::Singular { block: b });
                    }
                    let f = lambda.powf(-0.25);
                    scaled.column_mut(k).scale_mut(f);
                }
                let m = &scaled * scaled.transpose();
                let mut out = Array2::from_shape_fn((d, d), |(i, j)| m[(i, j)]);
                symmetrize(&mut out);
                Ok(out)
            })
            .collect();
        let mut out = self.clone();
        for (block, inv) in out.blocks.iter_mut().zip(inverses) {
            block.inv_sqrt = Some(inv?);
        }
        Ok(out)
    }

    /// Applies the cached `R^-1/2` block by block to a projected vector.
    pub fn whiten(&self, v: &FeatureVector) -> Result<FeatureVector> {
        v.require_stage(Stage::Projected)?;
        if v.values.len() != self.dim() {
            return Err(Error::shape("feature dimension for whitening", self.dim(), v.values.len()));
        }
        let mut values = Vec::with_capacity(v.values.len());
        let mut offset = 0;
        for block in &self.blocks {
            let inv = block.inv_sqrt.as_ref().ok_or_else(|| Error::MissingArtifact {
                name: "Hessian inverse square root".into(),
                producer: "estimate-hessian".into(),
            })?;
            let d = inv.nrows();
            let x = ndarray::Array1::from_iter(v.values[offset..offset + d].iter().map(|&x| x as f64));
            values.extend(inv.dot(&x).iter().map(|&y| y as f32));
            offset += d;
        }
        Ok(FeatureVector { example_id: v.example_id, stage: Stage::Whitened, values })
    }

    /// Whitens many vectors at once with matrix products.
    pub fn whiten_all(&self, vectors: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
        for v in vectors {
            v.require_stage(Stage::Projected)?;
            if v.values.len() != self.dim() {
                return Err(Error::shape("feature dimension for whitening", self.dim(), v.values.len()));
            }
        }
        let mut out: Vec<Vec<f32>> = vec![Vec::with_capacity(self.dim()); vectors.len()];
        let mut offset = 0;
        for block in &self.blocks {
            let inv = block.inv_sqrt.as_ref().ok_or_else(|| Error::MissingArtifact {
                name: "Hessian inverse square root".into(),
                producer: "estimate-hessian".into(),
            })?;
            let d = inv.nrows();
            let x = Array2::from_shape_fn((vectors.len(), d), |(i, j)| vectors[i].values[offset + j] as f64);
            // Rows of x R^-1/2 (R^-1/2 is symmetric).
            let y = x.dot(inv);
            for (row, o) in y.outer_iter().zip(out.iter_mut()) {
                o.extend(row.iter().map(|&v| v as f32));
            }
            offset += d;
        }
        Ok(vectors
            .iter()
            .zip(out)
            .map(|(v, values)| FeatureVector { example_id: v.example_id, stage: Stage::Whitened, values })
            .collect())
    }

    /// Concatenated eigenvalues of all blocks, descending.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.blocks.par_iter().flat_map_iter(|b| eigenvalues(&b.r)).collect();
        all.sort_by(|a, b| b.total_cmp(a));
        all
    }

    /// Multiplies every block by `c`, dropping cached inverses.
    pub fn scaled(&self, c: f64) -> HessianBlocks {
        let mut out = self.clone();
        for b in &mut out.blocks {
            b.r *= c;
            b.inv_sqrt = None;
        }
        out
    }
}

/// `lambda * R_eval + (1 - lambda) * R_train`, block by block.
pub fn mix(train: &HessianBlocks, eval: &HessianBlocks, lambda: f64) -> Result<HessianBlocks> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("mixing lambda must be in [0, 1], got {lambda}")));
    }
    if train.block_dims() != eval.block_dims() {
        return Err(Error::LayoutMismatch(format!(
            "train blocks {:?} vs eval blocks {:?}",
            train.block_dims(),
            eval.block_dims()
        )));
    }
    let blocks = train
        .blocks
        .iter()
        .zip(&eval.blocks)
        .map(|(t, e)| {
            let mut r = &e.r * lambda;
            r.zip_mut_with(&t.r, |a, &b| *a += (1.0 - lambda) * b);
            HessianBlock { r, count: t.count + e.count, inv_sqrt: None }
        })
        .collect();
    let provenance = Provenance {
        source: Source::Mixed { lambda },
        crossover_rank: train.provenance.crossover_rank.max(eval.provenance.crossover_rank),
        train_count: train.provenance.train_count,
        eval_count: eval.provenance.eval_count,
        projection_seed: train.provenance.projection_seed,
        tag: train.provenance.tag,
    };
    Ok(HessianBlocks { blocks, provenance })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    /// Grid value minimizing `|lambda s_eval - (1 - lambda) s_train|`.
    pub lambda: f64,
    /// Exact crossing `s_train / (s_eval + s_train)`.
    pub exact: f64,
    pub sigma_train: f64,
    pub sigma_eval: f64,
}

/// m-th largest value (1-based) of a descending spectrum.
pub fn sigma_at(spectrum: &[f64], rank: usize) -> Result<f64> {
    if rank == 0 || rank > spectrum.len() {
        return Err(Error::InvalidConfig(format!(
            "crossover rank must be in 1..={}, got {rank}",
            spectrum.len()
        )));
    }
    Ok(spectrum[rank - 1].max(0.0))
}

/// Picks the grid value at which the scaled spectra of `R_eval` and
/// `R_train` cross at the `rank`-th component.
pub fn select_lambda_from_spectra(train: &[f64], eval: &[f64], rank: usize, grid: &[f64]) -> Result<LambdaChoice> {
    if grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let sigma_train = sigma_at(train, rank)?;
    let sigma_eval = sigma_at(eval, rank)?;
    if sigma_train + sigma_eval <= 0.0 {
        return Err(Error::ZeroSpectrum { rank });
    }
    let gap = |l: f64| (l * sigma_eval - (1.0 - l) * sigma_train).abs();
    let mut lambda = grid[0];
    for &l in &grid[1..] {
        if gap(l) < gap(lambda) {
            lambda = l;
        }
    }
    Ok(LambdaChoice { lambda, exact: sigma_train / (sigma_eval + sigma_train), sigma_train, sigma_eval })
}

pub fn select_lambda(train: &HessianBlocks, eval: &HessianBlocks, rank: usize, grid: &[f64]) -> Result<LambdaChoice> {
    if train.block_dims() != eval.block_dims() {
        return Err(Error::LayoutMismatch("train and eval Hessians differ in layout".into()));
    }
    select_lambda_from_spectra(&train.spectrum(), &eval.spectrum(), rank, grid)
}

/// Frobenius distance `||R^-1/2 R R^-1/2 - I||_F / sqrt(d_b)` per block.
pub fn whitening_residual(h: &HessianBlocks) -> Result<Vec<f64>> {
    h.blocks
        .iter()
        .map(|b| {
            let inv = b.inv_sqrt.as_ref().ok_or_else(|| Error::MissingArtifact {
                name: "Hessian inverse square root".into(),
                producer: "estimate-hessian".into(),
            })?;
            let prod = inv.dot(&b.r).dot(inv);
            let d = prod.nrows();
            let mut sq = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let target = if i == j { 1.0 } else { 0.0 };
                    sq += (prod[[i, j]] - target).powi(2);
                }
            }
            Ok(sq.sqrt() / (d as f64).sqrt())
        })
        .collect()
}

/// Offsets of each block inside a concatenated vector.
pub fn block_ranges(dims: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut start = 0;
    dims.iter()
        .map(|&d| {
            let r = start..start + d;
            start += d;
            r
        })
        .collect()
}

/// Slice of a block-concatenated matrix, used by tests and diagnostics.
pub fn block_of(m: &Array2<f64>, range: std::ops::Range<usize>) -> Array2<f64> {
    m.slice(s![range.clone(), range]).to_owned()
}
