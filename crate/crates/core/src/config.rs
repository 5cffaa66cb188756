//! Declarative run configuration with embedded defaults.
//!
//! Every section rejects unknown keys. Dotted `key=value` overrides are
//! applied to the serialized tree and re-validated by deserialization, so an
//! override can only touch keys that exist.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::facttrace::BenchmarkSpec;
use crate::methods::{Bm25Params, Preset};
use crate::tinylm::{ModelConfig, TrainHyper, RESERVED_TOKENS};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub optimizer: TrainHyper,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 3000, optimizer: TrainHyper::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSection {
    pub seed: u64,
    /// Projected dimension of each layer block; a perfect square.
    pub block_dim: usize,
    /// Groups of consecutive layers; each gives an attention and an MLP block.
    pub layer_blocks: usize,
    /// Added to `sqrt(v)` in the second-moment correction.
    pub epsilon: f32,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection { seed: 0, block_dim: 1024, layer_blocks: 2, epsilon: 1e-8 }
    }
}

/// Targets used for the evaluation-side Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTargets {
    GroundTruth,
    /// The model's own greedy completions.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HessianSection {
    /// Eigenvalue floor as a fraction of the mean eigenvalue of each block.
    pub damping: f64,
    /// Fixed mixing weight; selected from `lambda_grid` when absent.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    /// Spectrum index where the scaled spectra should cross; `d / 64` when absent.
    pub crossover_rank: Option<usize>,
    pub eval_targets: EvalTargets,
}

impl Default for HessianSection {
    fn default() -> Self {
        HessianSection {
            damping: 1e-6,
            lambda: None,
            lambda_grid: vec![0.5, 0.9, 0.99, 0.999],
            crossover_rank: None,
            eval_targets: EvalTargets::GroundTruth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub presets: Vec<Preset>,
    pub bm25: Bm25Params,
    /// Retrieval depth kept per query.
    pub k: usize,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection { presets: Preset::ALL.to_vec(), bm25: Bm25Params::default(), k: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mrr_cap: usize,
    pub recall_k: usize,
    pub tailpatch_ks: Vec<usize>,
    /// Queries sampled for tail-patching; 0 skips tail-patch evaluation.
    pub tailpatch_queries: usize,
    pub tailpatch_presets: Vec<Preset>,
    /// Also tail-patch random passages as a baseline.
    pub tailpatch_random: bool,
    pub tailpatch_bm25: bool,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mrr_cap: 100,
            recall_k: 10,
            tailpatch_ks: vec![1, 3, 5, 10],
            tailpatch_queries: 50,
            tailpatch_presets: vec![Preset::TrackStar],
            tailpatch_random: true,
            tailpatch_bm25: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    /// Presets loaded by the service; the first is the request default.
    pub presets: Vec<Preset>,
    pub max_concurrent_tailpatch: usize,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            host: "127.0.0.1".into(),
            port: 8080,
            presets: vec![Preset::TrackStar, Preset::Exp2, Preset::Trak],
            max_concurrent_tailpatch: 2,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSection,
    pub projection: ProjectionSection,
    pub hessian: HessianSection,
    pub method: MethodSection,
    pub benchmark: BenchmarkSpec,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainSection::default(),
            projection: ProjectionSection::default(),
            hessian: HessianSection::default(),
            method: MethodSection::default(),
            benchmark: BenchmarkSpec::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Pipeline stages in dependency order. An artifact's tag covers the
/// sections of its stage and every earlier one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Model,
    Features,
    Index,
    Eval,
}

impl Stage {
    fn sections(self) -> &'static [&'static str] {
        const ALL: [&str; 7] = ["benchmark", "model", "train", "projection", "hessian", "method", "eval"];
        let n = match self {
            Stage::Data => 1,
            Stage::Model => 3,
            Stage::Features => 5,
            Stage::Index => 6,
            Stage::Eval => 7,
        };
        &ALL[..n]
    }
}

fn toml_to_json(v: toml::Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        toml::Value::String(s) => J::String(s),
        toml::Value::Integer(i) => J::from(i),
        toml::Value::Float(f) => J::from(f),
        toml::Value::Boolean(b) => J::Bool(b),
        toml::Value::Datetime(d) => J::String(d.to_string()),
        toml::Value::Array(a) => J::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => J::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> serde_json::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => toml_to_json(t.remove("v").expect("key present")),
        Err(_) => serde_json::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `section.key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not of the form key=value")))?;
            let mut node = &mut tree;
            for key in path.trim().split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown configuration key `{}`", path.trim())))?;
            }
            *node = parse_value(raw.trim());
        }
        serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(format!("after overrides: {e}")))
    }

    /// Sets every seed (benchmark, model, projection, evaluation sampling).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.benchmark.seed = seed;
        self.model.seed = seed;
        self.projection.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.optimizer.validate()?;
        self.benchmark.validate()?;
        self.method.bm25.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.benchmark.vocab_limit + RESERVED_TOKENS > self.model.vocab_size {
            return bad(format!(
                "benchmark.vocab_limit ({}) plus {RESERVED_TOKENS} reserved ids exceeds model.vocab_size ({})",
                self.benchmark.vocab_limit, self.model.vocab_size
            ));
        }
        if self.hessian.damping < 0.0 || !self.hessian.damping.is_finite() {
            return bad("hessian.damping must be finite and >= 0".into());
        }
        if let Some(l) = self.hessian.lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("hessian.lambda must be in [0, 1], got {l}"));
            }
        } else if self.hessian.lambda_grid.is_empty() || self.hessian.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("hessian.lambda_grid must be non-empty with values in [0, 1]".into());
        }
        if self.method.presets.is_empty() {
            return bad("method.presets is empty".into());
        }
        if self.method.k == 0 || self.eval.recall_k == 0 || self.eval.mrr_cap == 0 {
            return bad("method.k, eval.recall_k and eval.mrr_cap must be positive".into());
        }
        if self.eval.tailpatch_ks.is_empty() || self.eval.tailpatch_ks.contains(&0) {
            return bad("eval.tailpatch_ks must be non-empty and positive".into());
        }
        let depth = self.eval.mrr_cap.max(self.eval.recall_k).max(*self.eval.tailpatch_ks.iter().max().expect("non-empty"));
        if self.method.k < depth {
            return bad(format!("method.k ({}) is below the deepest metric cutoff ({depth})", self.method.k));
        }
        if self.eval.tailpatch_queries > self.benchmark.fact_count() {
            return bad(format!(
                "eval.tailpatch_queries ({}) exceeds the number of facts ({})",
                self.eval.tailpatch_queries,
                self.benchmark.fact_count()
            ));
        }
        if self.serve.presets.is_empty() {
            return bad("serve.presets is empty".into());
        }
        if let Some(p) = self.serve.presets.iter().find(|p| !self.method.presets.contains(p)) {
            return bad(format!("serve preset `{}` is not in method.presets", p.as_str()));
        }
        if self.serve.max_concurrent_tailpatch == 0 {
            return bad("serve.max_concurrent_tailpatch must be at least 1".into());
        }
        Ok(())
    }

    fn digest(value: &serde_json::Value) -> [u8; 32] {
        // serde_json maps are ordered by key, so this is canonical.
        Sha256::digest(serde_json::to_vec(value).expect("serializable")).into()
    }

    /// Hex SHA-256 of the canonical JSON form of the whole configuration.
    pub fn hash(&self) -> String {
        hex::encode(Self::digest(&serde_json::to_value(self).expect("serializable")))
    }

    /// Hex SHA-256 over the sections that determine artifacts of `stage`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        hex::encode(self.stage_digest(stage))
    }

    fn stage_digest(&self, stage: Stage) -> [u8; 32] {
        let tree = serde_json::to_value(self).expect("serializable");
        let sub: serde_json::Map<String, serde_json::Value> =
            stage.sections().iter().map(|&s| (s.to_string(), tree[s].clone())).collect();
        Self::digest(&serde_json::Value::Object(sub))
    }

    /// First 16 bytes of the stage hash, embedded in binary artifacts.
    pub fn stage_tag(&self, stage: Stage) -> [u8; 16] {
        let d = self.stage_digest(stage);
        d[..16].try_into().expect("16 bytes")
    }

    /// Crossover rank for lambda selection.
    pub fn crossover_rank(&self, dim: usize) -> usize {
        self.hessian.crossover_rank.unwrap_or((dim / 64).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::default().with_overrides(&["model.width=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["model"]).is_err());
    }

    #[test]
    fn overrides_apply_typed_values() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "train.steps=10",
                "hessian.lambda=0.9",
                "method.presets=[\"exp1\", \"trackstar\"]",
                "hessian.eval_targets=model",
                "train.optimizer.learning_rate = 0.5",
            ])
            .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.hessian.lambda, Some(0.9));
        assert_eq!(cfg.method.presets, vec![Preset::Exp1, Preset::TrackStar]);
        assert_eq!(cfg.hessian.eval_targets, EvalTargets::Model);
        assert_eq!(cfg.train.optimizer.learning_rate, 0.5);
        assert!(RunConfig::default().with_overrides(&["train.steps=many"]).is_err());
    }

    #[test]
    fn hash_ignores_key_order_but_not_values() {
        let a = RunConfig::from_toml("[train]\nsteps = 5\n[model]\nseed = 2\n").unwrap();
        let b = RunConfig::from_toml("[model]\nseed = 2\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn stage_hash_covers_upstream_sections_only() {
        let base = RunConfig::default();
        let eval_changed = base.with_overrides(&["eval.recall_k=5"]).unwrap();
        assert_eq!(base.stage_hash(Stage::Index), eval_changed.stage_hash(Stage::Index));
        assert_ne!(base.stage_hash(Stage::Eval), eval_changed.stage_hash(Stage::Eval));
        let data_changed = base.clone().with_seed(9);
        assert_ne!(base.stage_hash(Stage::Data), data_changed.stage_hash(Stage::Data));
        let serve_changed = base.with_overrides(&["serve.port=1"]).unwrap();
        assert_eq!(base.stage_hash(Stage::Eval), serve_changed.stage_hash(Stage::Eval));
    }

    #[test]
    fn validation_catches_inconsistencies() {
        let cfg = RunConfig::default().with_overrides(&["method.k=5"]).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::default().with_overrides(&["model.vocab_size=100"]).unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::default().with_overrides(&["hessian.lambda=2.0"]).unwrap();
        assert!(cfg.validate().is_err());
    }
}
