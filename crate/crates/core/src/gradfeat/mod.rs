//! Gradient featurization: per-parameter second-moment correction, layer
//! block projection, optional whitening and unit normalization.

mod layout;
mod projection;

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use layout::{BlockMember, LayerBlock, LayerBlockLayout, MatrixKind};
pub use projection::ProjectionSpec;

use crate::hessian::HessianBlocks;
use crate::tinylm::{self, ExampleRecord, GradientSketch, ModelState, OptimizerState, OutputFn, QWeighting};
use crate::{Error, ExampleId, Result};

/// Pipeline position of a feature vector. Stages only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Projected,
    Whitened,
    Normalized,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Projected => "projected",
            Stage::Whitened => "whitened",
            Stage::Normalized => "normalized",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub example_id: ExampleId,
    pub stage: Stage,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn require_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                example: self.example_id,
                expected: expected.as_str(),
                found: self.stage.as_str(),
            });
        }
        Ok(())
    }
}

/// Divides by the Euclidean norm.
pub fn normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm(v.example_id));
    }
    Ok(FeatureVector {
        example_id: v.example_id,
        stage: Stage::Normalized,
        values: v.values.iter().map(|&x| (x as f64 / norm) as f32).collect(),
    })
}

/// Per-parameter optimizer second moments arranged like the layer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondMomentBlocks(pub Vec<Array2<f32>>);

impl SecondMomentBlocks {
    pub fn from_optimizer(state: &ModelState, optimizer: &OptimizerState, blocks: &LayerBlockLayout) -> Result<Self> {
        let params = state.layout();
        optimizer.check_layout(&params)?;
        Ok(SecondMomentBlocks(blocks.gather(&params, &optimizer.per_parameter(&params))?))
    }
}

/// `g / (sqrt(v) + epsilon)` entrywise.
pub fn second_moment_correct(sketch: &GradientSketch, moments: &SecondMomentBlocks, epsilon: f32) -> Result<GradientSketch> {
    if sketch.blocks.len() != moments.0.len() {
        return Err(Error::shape("second-moment block count", sketch.blocks.len(), moments.0.len()));
    }
    let mut out = sketch.clone();
    for (b, (g, v)) in out.blocks.iter_mut().zip(&moments.0).enumerate() {
        if g.dim() != v.dim() {
            return Err(Error::shape(format!("second moments of block {b}"), format!("{:?}", g.dim()), format!("{:?}", v.dim())));
        }
        g.zip_mut_with(v, |g, &v| *g /= v.sqrt() + epsilon);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureOptions {
    pub output_fn: OutputFn,
    pub weighting: QWeighting,
    pub use_optimizer_correction: bool,
    pub use_unit_norm: bool,
    pub epsilon: f32,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions {
            output_fn: OutputFn::Loss,
            weighting: QWeighting::Token,
            use_optimizer_correction: true,
            use_unit_norm: true,
            epsilon: 1e-8,
        }
    }
}

/// Output of [`Featurizer::featurize`]: the feature vector and the mean
/// target-token probability (used by score multipliers).
#[derive(Clone, Debug, PartialEq)]
pub struct Featurized {
    pub vector: FeatureVector,
    pub mean_probability: f64,
}

/// Frozen inputs of the featurization pipeline
/// `gradient -> [V correction] -> projection -> [R^-1/2] -> [unit norm]`.
#[derive(Clone, Copy)]
pub struct Featurizer<'a> {
    pub state: &'a ModelState,
    pub blocks: &'a LayerBlockLayout,
    pub projection: &'a ProjectionSpec,
    pub moments: Option<&'a SecondMomentBlocks>,
    pub hessian: Option<&'a HessianBlocks>,
    pub options: FeatureOptions,
}

impl Featurizer<'_> {
    /// Checks that the frozen artifacts agree with each other before any
    /// example is processed.
    pub fn validate(&self) -> Result<()> {
        if self.projection.blocks() != self.blocks.len() {
            return Err(Error::LayoutMismatch(format!(
                "projection has {} blocks, layer layout has {}",
                self.projection.blocks(),
                self.blocks.len()
            )));
        }
        if let Some(h) = self.hessian {
            if h.block_dims() != self.projection.block_dims() {
                return Err(Error::LayoutMismatch(format!(
                    "Hessian blocks {:?} do not match projection blocks {:?}",
                    h.block_dims(),
                    self.projection.block_dims()
                )));
            }
            if !h.has_inverse_sqrt() {
                return Err(Error::MissingArtifact {
                    name: "Hessian inverse square root".into(),
                    producer: "estimate-hessian".into(),
                });
            }
        }
        if self.options.use_optimizer_correction && self.moments.is_none() {
            return Err(Error::MissingArtifact { name: "optimizer second moments".into(), producer: "train".into() });
        }
        Ok(())
    }

    /// Projected (and optionally V-corrected) features, before whitening.
    pub fn projected(&self, example: &ExampleRecord) -> Result<Featurized> {
        let o = &self.options;
        let (mut sketch, mean_probability) = tinylm::gradient_sketch(self.state, example, o.output_fn, o.weighting, self.blocks)?;
        if o.use_optimizer_correction {
            let moments = self.moments.ok_or_else(|| Error::MissingArtifact {
                name: "optimizer second moments".into(),
                producer: "train".into(),
            })?;
            sketch = second_moment_correct(&sketch, moments, o.epsilon)?;
        }
        Ok(Featurized { vector: self.projection.project(&sketch)?, mean_probability })
    }

    pub fn featurize(&self, example: &ExampleRecord) -> Result<Featurized> {
        let mut out = self.projected(example)?;
        if let Some(h) = self.hessian {
            out.vector = h.whiten(&out.vector)?;
        }
        if self.options.use_unit_norm {
            out.vector = normalize(&out.vector)?;
        }
        Ok(out)
    }
}
