//! Named attribution methods (the ablation presets and TRAK) and the BM25
//! lexical baseline.

mod bm25;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bm25::{Bm25Index, Bm25Params, Bm25Result};

use crate::gradfeat::{FeatureOptions, Featurizer, LayerBlockLayout, ProjectionSpec, SecondMomentBlocks};
use crate::hessian::{HessianBlocks, Source};
use crate::index::{FeatureIndex, RetrievalResult, RetrieveOptions};
use crate::tinylm::{ExampleRecord, ModelState, OutputFn, QWeighting};
use crate::{Error, Result};

/// Which Gauss-Newton approximation whitens the features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    None,
    Train,
    /// `lambda R_eval + (1 - lambda) R_train`.
    Mixed(f64),
}

impl fmt::Display for HessianMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HessianMode::None => f.write_str("none"),
            HessianMode::Train => f.write_str("train"),
            HessianMode::Mixed(l) => write!(f, "mixed:{l}"),
        }
    }
}

impl FromStr for HessianMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(HessianMode::None),
            "train" => Ok(HessianMode::Train),
            _ => {
                let lambda = s
                    .strip_prefix("mixed:")
                    .and_then(|l| l.parse::<f64>().ok())
                    .filter(|l| (0.0..=1.0).contains(l))
                    .ok_or_else(|| Error::InvalidConfig(format!("bad Hessian mode `{s}`")))?;
                Ok(HessianMode::Mixed(lambda))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub output_fn: OutputFn,
    pub use_optimizer_correction: bool,
    pub hessian_mode: HessianMode,
    pub use_unit_norm: bool,
    /// Unweighted margin gradients with candidate scores multiplied by
    /// `1 - mean p` instead of token-level `Q`.
    pub trak_example_level_q: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Exp1,
    Exp2,
    Exp3,
    Exp4,
    Exp5,
    TrackStar,
    Trak,
}

impl Preset {
    pub const ALL: [Preset; 7] =
        [Preset::Exp1, Preset::Exp2, Preset::Exp3, Preset::Exp4, Preset::Exp5, Preset::TrackStar, Preset::Trak];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Exp1 => "exp1",
            Preset::Exp2 => "exp2",
            Preset::Exp3 => "exp3",
            Preset::Exp4 => "exp4",
            Preset::Exp5 => "exp5",
            Preset::TrackStar => "trackstar",
            Preset::Trak => "trak",
        }
    }

    /// Method settings; `lambda` is only used by TrackStar.
    pub fn config(self, lambda: f64) -> MethodConfig {
        let base = MethodConfig {
            output_fn: OutputFn::Loss,
            use_optimizer_correction: false,
            hessian_mode: HessianMode::None,
            use_unit_norm: false,
            trak_example_level_q: false,
        };
        let exp2 = MethodConfig { use_unit_norm: true, ..base };
        let exp4 = MethodConfig { use_optimizer_correction: true, ..exp2 };
        match self {
            Preset::Exp1 => base,
            Preset::Exp2 => exp2,
            Preset::Exp3 => MethodConfig { hessian_mode: HessianMode::Train, ..exp2 },
            Preset::Exp4 => exp4,
            Preset::Exp5 => MethodConfig { hessian_mode: HessianMode::Train, ..exp4 },
            Preset::TrackStar => MethodConfig { hessian_mode: HessianMode::Mixed(lambda), ..exp4 },
            Preset::Trak => MethodConfig {
                output_fn: OutputFn::Margin,
                hessian_mode: HessianMode::Train,
                trak_example_level_q: true,
                ..base
            },
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.as_str()).collect();
                Error::InvalidConfig(format!("unknown method preset `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Gradient features that a method's Hessian must be estimated from. Methods
/// sharing a kind share projected vectors and `R_train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKind {
    pub output_fn: OutputFn,
    pub weighting: QWeighting,
    pub use_optimizer_correction: bool,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = match self.weighting {
            QWeighting::Token => "token",
            QWeighting::ExampleMean => "example",
            QWeighting::Unweighted => "none",
        };
        write!(f, "{}-q{}-opt{}", self.output_fn, w, self.use_optimizer_correction as u8)
    }
}

/// Frozen inputs shared by every method.
#[derive(Clone, Copy)]
pub struct MethodArtifacts<'a> {
    pub state: &'a ModelState,
    pub blocks: &'a LayerBlockLayout,
    pub projection: &'a ProjectionSpec,
    pub moments: Option<&'a SecondMomentBlocks>,
    pub epsilon: f32,
}

impl MethodConfig {
    pub fn weighting(&self) -> QWeighting {
        if self.trak_example_level_q {
            QWeighting::Unweighted
        } else {
            QWeighting::Token
        }
    }

    pub fn feature_kind(&self) -> FeatureKind {
        FeatureKind {
            output_fn: self.output_fn,
            weighting: self.weighting(),
            use_optimizer_correction: self.use_optimizer_correction,
        }
    }

    /// `fn=..;opt=..;hess=..;norm=..;exq=..;proj=<seed>,<d>`.
    pub fn fingerprint(&self, projection_seed: u64, dim: usize) -> String {
        format!(
            "fn={};opt={};hess={};norm={};exq={};proj={},{}",
            self.output_fn,
            self.use_optimizer_correction as u8,
            self.hessian_mode,
            self.use_unit_norm as u8,
            self.trak_example_level_q as u8,
            projection_seed,
            dim
        )
    }

    /// Inverse of [`MethodConfig::fingerprint`].
    pub fn parse_fingerprint(s: &str) -> Result<(MethodConfig, u64, usize)> {
        let bad = || Error::InvalidConfig(format!("malformed method fingerprint `{s}`"));
        let fields: Vec<(&str, &str)> = s.split(';').map(|kv| kv.split_once('=').ok_or_else(bad)).collect::<Result<_>>()?;
        let keys: Vec<&str> = fields.iter().map(|f| f.0).collect();
        if keys != ["fn", "opt", "hess", "norm", "exq", "proj"] {
            return Err(bad());
        }
        let flag = |v: &str| match v {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad()),
        };
        let (seed, dim) = fields[5].1.split_once(',').ok_or_else(bad)?;
        let cfg = MethodConfig {
            output_fn: fields[0].1.parse()?,
            use_optimizer_correction: flag(fields[1].1)?,
            hessian_mode: fields[2].1.parse()?,
            use_unit_norm: flag(fields[3].1)?,
            trak_example_level_q: flag(fields[4].1)?,
        };
        Ok((cfg, seed.parse().map_err(|_| bad())?, dim.parse().map_err(|_| bad())?))
    }

    pub fn feature_options(&self, epsilon: f32) -> FeatureOptions {
        FeatureOptions {
            output_fn: self.output_fn,
            weighting: self.weighting(),
            use_optimizer_correction: self.use_optimizer_correction,
            use_unit_norm: self.use_unit_norm,
            epsilon,
        }
    }

    /// Builds the featurizer after checking that every artifact the flags
    /// require is present and of the right kind.
    pub fn featurizer<'a>(&self, art: &MethodArtifacts<'a>, hessian: Option<&'a HessianBlocks>) -> Result<Featurizer<'a>> {
        if self.use_optimizer_correction && art.moments.is_none() {
            return Err(Error::MissingArtifact { name: "optimizer second moments".into(), producer: "train".into() });
        }
        let hessian = match self.hessian_mode {
            HessianMode::None => None,
            mode => {
                let h = hessian.ok_or_else(|| Error::MissingArtifact {
                    name: format!("{} Hessian for {}", mode, self.feature_kind()),
                    producer: "estimate-hessian".into(),
                })?;
                let ok = match (mode, h.provenance.source) {
                    (HessianMode::Train, Source::Train) => true,
                    (HessianMode::Mixed(a), Source::Mixed { lambda }) => (a - lambda).abs() < 1e-12,
                    _ => false,
                };
                if !ok {
                    return Err(Error::FingerprintMismatch {
                        index: format!("hess={}", mode),
                        query: format!("Hessian estimated as {:?}", h.provenance.source),
                    });
                }
                Some(h)
            }
        };
        let f = Featurizer {
            state: art.state,
            blocks: art.blocks,
            projection: art.projection,
            moments: if self.use_optimizer_correction { art.moments } else { None },
            hessian,
            options: self.feature_options(art.epsilon),
        };
        f.validate()?;
        Ok(f)
    }
}

/// Featurizes `query` with the method and retrieves the top `k` rows of an
/// index built with the same method. TRAK scores are multiplied by each
/// candidate's `1 - mean p`.
pub fn score_with_method(
    config: &MethodConfig,
    art: &MethodArtifacts<'_>,
    hessian: Option<&HessianBlocks>,
    index: &FeatureIndex,
    query: &ExampleRecord,
    k: usize,
) -> Result<RetrievalResult> {
    let featurizer = config.featurizer(art, hessian)?;
    let q = featurizer.featurize(query)?;
    let fingerprint = config.fingerprint(art.projection.seed(), art.projection.dim());
    let multipliers = config.trak_example_level_q.then(|| index.trak_multipliers());
    index.retrieve_with(
        &q.vector,
        &fingerprint,
        k,
        RetrieveOptions { multipliers: multipliers.as_deref(), shard_rows: None },
    )
}
