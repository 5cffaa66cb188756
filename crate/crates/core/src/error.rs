use std::io;

use crate::ExampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid example {id}: {reason}")]
    InvalidExample { id: ExampleId, reason: String },

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("non-finite loss at step {step} (example {example})")]
    NonFiniteLoss { step: u64, example: ExampleId },

    #[error("non-finite gradient in layer block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite parameter update in tensor `{tensor}`")]
    NonFiniteUpdate { tensor: String },

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("cannot normalize zero-norm feature vector for example {0}")]
    ZeroNorm(ExampleId),

    #[error("feature vector for example {example} is at stage {found}, expected {expected}")]
    Stage {
        example: ExampleId,
        expected: &'static str,
        found: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("block {block} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { block: usize, asymmetry: f64 },

    #[error("block {block} is singular and no damping was requested")]
    Singular { block: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("eigenvalue spectra are zero at crossover rank {rank}")]
    ZeroSpectrum { rank: usize },

    #[error("method fingerprint mismatch: index has `{index}`, query has `{query}`")]
    FingerprintMismatch { index: String, query: String },

    #[error("missing artifact `{name}` (produce it with `{producer}`)")]
    MissingArtifact { name: String, producer: String },

    #[error("infeasible benchmark specification: {0}")]
    Infeasible(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
