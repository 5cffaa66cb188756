//! Training data attribution by gradient similarity.
//!
//! The crate covers the whole desk-scale pipeline: a small decoder-only
//! language model with hand-written backpropagation ([`tinylm`]), gradient
//! featurization with optimizer second-moment correction and two-sided random
//! projection ([`gradfeat`]), block-diagonal Gauss-Newton whitening
//! ([`hessian`]), an exact inner-product index ([`index`]), named attribution
//! methods plus a BM25 baseline ([`methods`]) and the fact-tracing benchmark
//! with its metrics ([`facttrace`]).
//!
//! Influence of a training example `m` on a query `q` is the dot product of
//! their unit-normalized feature vectors, so every score lies in `[-1, 1]`.

pub mod config;
pub mod error;
pub mod facttrace;
pub mod gradfeat;
pub mod hessian;
pub mod index;
pub mod io;
pub mod methods;
pub mod pipeline;
pub mod text;
pub mod tinylm;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use gradfeat::{FeatureVector, LayerBlockLayout, ProjectionSpec, Stage};
pub use hessian::HessianBlocks;
pub use index::{FeatureIndex, RetrievalResult};
pub use methods::{MethodConfig, Preset};
pub use tinylm::{ExampleRecord, ModelConfig, ModelState, OptimizerState, OutputFn, TrainHyper};

/// Stable identifier of a corpus passage or query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExampleId(pub u64);

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for ExampleId {
    fn from(v: u64) -> Self {
        ExampleId(v)
    }
}
