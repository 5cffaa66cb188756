//! Loaded artifacts answering ad-hoc queries and tail-patch what-ifs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use trackstar::config::RunConfig;
use trackstar::facttrace::{
    categorize_proponent, prediction_matches, Benchmark, Category, EvalReport, FactRecord, PassageLabel,
};
use trackstar::hessian::HessianBlocks;
use trackstar::index::RetrievalResult;
use trackstar::pipeline::{finish_vectors, retrieve_all, Context};
use trackstar::tinylm::{self, ExampleRecord, TrainHyper, EOS};
use trackstar::{ExampleId, FeatureIndex, MethodConfig, Preset};

use crate::artifacts::Store;

pub const MAX_K: usize = 100;
const SNIPPET_CHARS: usize = 160;
const MAX_NEW_TOKENS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl From<trackstar::Error> for QueryError {
    fn from(e: trackstar::Error) -> Self {
        QueryError::Internal(e.into())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub prompt: String,
    #[serde(default)]
    pub target: Option<String>,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub k: Option<usize>,
    /// Fingerprint the client expects the preset's index to have.
    #[serde(default)]
    pub fingerprint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactView {
    pub id: u64,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub bucket: String,
    pub frequency: usize,
}

impl From<&FactRecord> for FactView {
    fn from(f: &FactRecord) -> Self {
        FactView {
            id: f.id,
            subject: f.subject.name().to_string(),
            relation: f.relation.clone(),
            object: f.object.name().to_string(),
            bucket: f.bucket.clone(),
            frequency: f.frequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProponentView {
    pub example_id: u64,
    pub rank: usize,
    pub score: f64,
    pub snippet: String,
    /// Relation to the query's fact; absent when the prompt is not a known fact.
    pub category: Option<Category>,
    /// Frequency bucket of the fact named in the passage's construction label.
    pub bucket: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Request,
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub preset: Preset,
    pub fingerprint: String,
    pub prompt: String,
    pub target: String,
    pub target_source: TargetSource,
    pub prediction: String,
    /// Whether the prediction names the fact's object; absent for unknown prompts.
    pub correct: Option<bool>,
    pub fact: Option<FactView>,
    pub proponents: Vec<ProponentView>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailPatchRequest {
    pub query: TailPatchQuery,
    pub example_id: u64,
    /// Overrides the base learning rate of the tail-patch step.
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailPatchQuery {
    pub prompt: String,
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPatchResponse {
    pub example_id: u64,
    pub target: String,
    /// Target sequence probability before and after the step.
    pub before: f64,
    pub after: f64,
    /// `after - before`, as a probability (not percentage points).
    pub delta_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleView {
    pub id: u64,
    pub text: String,
    pub label: PassageLabel,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetStats {
    pub preset: Preset,
    pub fingerprint: String,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadlineRow {
    pub method: String,
    pub mrr: f64,
    pub recall: f64,
    pub tail_patch_pp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub passages: usize,
    pub facts: usize,
    pub dim: usize,
    pub config_hash: String,
    pub default_preset: Preset,
    pub presets: Vec<PresetStats>,
    /// Headline numbers of the stored evaluation report, when current.
    pub eval: Option<Vec<HeadlineRow>>,
    pub model_accuracy: Option<f64>,
    pub recall_k: Option<usize>,
}

pub struct Method {
    pub config: MethodConfig,
    pub index: FeatureIndex,
    pub hessian: Option<HessianBlocks>,
}

pub struct Session {
    pub config: RunConfig,
    pub bench: Benchmark,
    pub ctx: Context,
    pub methods: BTreeMap<Preset, Method>,
    pub report: Option<EvalReport>,
}

impl Session {
    /// Loads the model, Hessians and the indexes of `presets`.
    pub fn load(store: &Store, cfg: &RunConfig, presets: &[Preset]) -> anyhow::Result<Session> {
        let bench = store.load_data(cfg)?.bench;
        let ckpt = store.load_model(cfg)?;
        let ctx = Context::new(cfg, ckpt.state, ckpt.optimizer)?;
        let hessians = store.load_hessians(cfg)?;
        let configs = trackstar::pipeline::method_configs(&cfg.method.presets, &hessians);
        let mut methods = BTreeMap::new();
        for &p in presets {
            let (_, config) = configs
                .iter()
                .find(|(q, _)| *q == p)
                .ok_or_else(|| anyhow::anyhow!("preset `{p}` is not in method.presets"))?;
            let index = store.load_index(cfg, p)?;
            let expected = ctx.fingerprint(config);
            if index.fingerprint() != expected {
                anyhow::bail!("index for `{p}` has fingerprint `{}`, expected `{expected}`", index.fingerprint());
            }
            let hessian = hessians.for_method(config).cloned();
            methods.insert(p, Method { config: config.clone(), index, hessian });
        }
        Ok(Session { config: cfg.clone(), bench, ctx, methods, report: store.load_report(cfg)? })
    }

    pub fn default_preset(&self) -> Preset {
        self.config.serve.presets.first().copied().filter(|p| self.methods.contains_key(p)).unwrap_or_else(|| {
            self.methods.keys().next().copied().unwrap_or(self.config.serve.presets[0])
        })
    }

    fn stop_tokens(&self) -> Vec<u32> {
        self.bench.vocab.id(".").into_iter().chain([EOS]).collect()
    }

    /// Greedy completion of `prompt` (without BOS) as text.
    pub fn predict(&self, prompt: &[u32]) -> Result<String, QueryError> {
        let out = tinylm::greedy_decode(&self.ctx.state, prompt, MAX_NEW_TOKENS, &self.stop_tokens())?;
        Ok(self.bench.vocab.decode(&out))
    }

    fn encode_prompt(&self, prompt: &str) -> Result<Vec<u32>, QueryError> {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(QueryError::BadRequest("prompt must be non-empty".into()));
        }
        let (ids, _) = self.bench.encode_query(prompt, "");
        if ids.len() >= self.ctx.state.config.seq_len_max {
            return Err(QueryError::BadRequest(format!(
                "prompt has {} tokens; the model context is {}",
                ids.len(),
                self.ctx.state.config.seq_len_max
            )));
        }
        Ok(ids)
    }

    /// Query target as given, else the model's greedy prediction.
    fn resolve_target(&self, prompt_ids: &[u32], target: Option<&str>) -> Result<(String, Vec<u32>, TargetSource, String), QueryError> {
        let prediction = self.predict(prompt_ids)?;
        let (text, source) = match target.map(str::trim) {
            Some(t) if !t.is_empty() => (t.to_string(), TargetSource::Request),
            Some(_) => return Err(QueryError::BadRequest("target must be non-empty when given".into())),
            None if prediction.trim().is_empty() => {
                return Err(QueryError::BadRequest("the model predicts an empty completion; supply a target".into()))
            }
            None => (prediction.clone(), TargetSource::Prediction),
        };
        let ids = self.bench.vocab.encode(&text);
        if ids.is_empty() {
            return Err(QueryError::BadRequest("target has no tokens".into()));
        }
        if prompt_ids.len() + ids.len() > self.ctx.state.config.seq_len_max {
            return Err(QueryError::BadRequest("prompt and target exceed the model context".into()));
        }
        Ok((text, ids, source, prediction))
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse, QueryError> {
        let k = req.k.unwrap_or(10);
        if !(1..=MAX_K).contains(&k) {
            return Err(QueryError::BadRequest(format!("k must be in [1, {MAX_K}], got {k}")));
        }
        let preset = req.preset.unwrap_or_else(|| self.default_preset());
        let method = self
            .methods
            .get(&preset)
            .ok_or_else(|| QueryError::BadRequest(format!("preset `{preset}` is not loaded by this service")))?;
        if let Some(fp) = &req.fingerprint {
            if fp != method.index.fingerprint() {
                return Err(QueryError::Conflict(format!(
                    "fingerprint mismatch for `{preset}`: service index has `{}`, request has `{fp}`",
                    method.index.fingerprint()
                )));
            }
        }
        let prompt_ids = self.encode_prompt(&req.prompt)?;
        let (target, target_ids, target_source, prediction) = self.resolve_target(&prompt_ids, req.target.as_deref())?;
        let fact = self.bench.fact_for_prompt(&req.prompt);
        let result = self.retrieve_one(method, &prompt_ids, &target_ids, k)?;
        let proponents = result
            .hits
            .iter()
            .map(|h| {
                let passage = self.bench.passage(h.example_id);
                ProponentView {
                    example_id: h.example_id.0,
                    rank: h.rank,
                    score: h.score,
                    snippet: passage.map(|p| snippet(&p.text)).unwrap_or_default(),
                    category: passage.zip(fact).map(|(p, f)| categorize_proponent(p, f)),
                    bucket: passage.and_then(|p| self.label_bucket(&p.label, fact)),
                }
            })
            .collect();
        Ok(QueryResponse {
            preset,
            fingerprint: method.index.fingerprint().to_string(),
            prompt: req.prompt.clone(),
            target,
            target_source,
            correct: fact.map(|f| prediction_matches(&prediction, &f.object)),
            prediction,
            fact: fact.map(FactView::from),
            proponents,
        })
    }

    fn label_bucket(&self, label: &PassageLabel, query_fact: Option<&FactRecord>) -> Option<String> {
        let id = match label {
            // Prefer the query's own fact when the passage entails several.
            PassageLabel::Entails { facts } => {
                query_fact.map(|f| f.id).filter(|id| facts.contains(id)).or_else(|| facts.first().copied())?
            }
            PassageLabel::BothEntities { fact } => *fact,
            _ => return None,
        };
        self.bench.facts.iter().find(|f| f.id == id).map(|f| f.bucket.clone())
    }

    pub fn retrieve_one(&self, method: &Method, prompt: &[u32], target: &[u32], k: usize) -> Result<RetrievalResult, QueryError> {
        let example = ExampleRecord::completion(ExampleId(u64::MAX), prompt, target);
        let kind = method.config.feature_kind();
        let projected = self.ctx.project(kind, std::slice::from_ref(&example))?;
        let finished = finish_vectors(&method.config, method.hessian.as_ref(), &[projected[0].vector.clone()])?;
        let mut results = retrieve_all(&method.index, &method.config, &finished, k)?;
        Ok(results.pop().expect("one query"))
    }

    pub fn tailpatch(&self, req: &TailPatchRequest) -> Result<TailPatchResponse, QueryError> {
        let passage = self
            .bench
            .passage(ExampleId(req.example_id))
            .ok_or_else(|| QueryError::NotFound(format!("unknown example {}", req.example_id)))?;
        let prompt_ids = self.encode_prompt(&req.query.prompt)?;
        let (target, target_ids, _, _) = self.resolve_target(&prompt_ids, req.query.target.as_deref())?;
        let mut hyper: TrainHyper = self.ctx.optimizer.hyper.clone();
        if let Some(lr) = req.learning_rate {
            if !lr.is_finite() || lr < 0.0 {
                return Err(QueryError::BadRequest(format!("learning_rate must be finite and >= 0, got {lr}")));
            }
            hyper.learning_rate = lr;
        }
        let proponent = trackstar::facttrace::passage_example(passage.id, &passage.token_ids);
        let before = tinylm::target_probability(&self.ctx.state, &prompt_ids, &target_ids)?;
        let patched = tinylm::tail_patch_step(&self.ctx.state, &self.ctx.optimizer, &proponent, &hyper)?;
        let after = tinylm::target_probability(&patched, &prompt_ids, &target_ids)?;
        Ok(TailPatchResponse { example_id: req.example_id, target, before, after, delta_probability: after - before })
    }

    pub fn example(&self, id: u64) -> Result<ExampleView, QueryError> {
        let p = self.bench.passage(ExampleId(id)).ok_or_else(|| QueryError::NotFound(format!("unknown example {id}")))?;
        Ok(ExampleView { id, text: p.text.clone(), label: p.label.clone(), tokens: p.token_ids.len() })
    }

    pub fn stats(&self) -> Stats {
        let tp_k = self.config.eval.tailpatch_ks.iter().max().copied();
        Stats {
            passages: self.bench.passages.len(),
            facts: self.bench.facts.len(),
            dim: self.ctx.dim(),
            config_hash: self.config.hash(),
            default_preset: self.default_preset(),
            presets: self
                .methods
                .iter()
                .map(|(p, m)| PresetStats { preset: *p, fingerprint: m.index.fingerprint().to_string(), rows: m.index.len() })
                .collect(),
            eval: self.report.as_ref().map(|r| {
                r.methods
                    .iter()
                    .map(|m| HeadlineRow {
                        method: m.method.clone(),
                        mrr: m.mrr,
                        recall: m.recall,
                        tail_patch_pp: m.tail_patch.as_ref().zip(tp_k).and_then(|(t, k)| t.at(k)),
                    })
                    .collect()
            }),
            model_accuracy: self.report.as_ref().map(|r| r.accuracy),
            recall_k: self.report.as_ref().map(|r| r.recall_k),
        }
    }
}

fn snippet(text: &str) -> String {
    match text.char_indices().nth(SNIPPET_CHARS) {
        Some((at, _)) => format!("{}...", &text[..at]),
        None => text.to_string(),
    }
}
