//! In-memory orchestration of the full benchmark run.
//!
//! Projected features depend only on the feature kind (output function,
//! `Q` weighting, optimizer correction), so they are computed once per kind
//! and every method derives its rows from them by whitening and
//! normalization.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{EvalTargets, RunConfig, Stage};
use crate::facttrace::{
    split_by_correctness, tail_patch_eval, Benchmark, EvalReport, MethodReport, TailPatchQuery, TailPatchReport,
};
use crate::gradfeat::{normalize, FeatureVector, Featurized, Featurizer, LayerBlockLayout, ProjectionSpec, SecondMomentBlocks};
use crate::hessian::{estimate_r, mix, select_lambda, HessianBlocks, LambdaChoice, Source};
use crate::index::{FeatureIndex, Hit, IndexHeader, RetrievalResult, RetrieveOptions, RowMeta};
use crate::methods::{Bm25Index, FeatureKind, HessianMode, MethodArtifacts, MethodConfig, Preset};
use crate::tinylm::{self, ExampleRecord, ModelConfig, ModelState, OptimizerState, TrainOutput, EOS};
use crate::{Error, ExampleId, Result};

/// Model config with the vocabulary checked against the benchmark.
pub fn model_config(cfg: &RunConfig, bench: &Benchmark) -> Result<ModelConfig> {
    if bench.vocab.size() > cfg.model.vocab_size {
        return Err(Error::InvalidConfig(format!(
            "benchmark vocabulary has {} ids, model.vocab_size is {}",
            bench.vocab.size(),
            cfg.model.vocab_size
        )));
    }
    Ok(cfg.model.clone())
}

pub fn train(cfg: &RunConfig, bench: &Benchmark) -> Result<TrainOutput> {
    tinylm::train(&model_config(cfg, bench)?, &bench.corpus_examples(), cfg.train.steps, &cfg.train.optimizer)
}

/// Frozen model-stage artifacts shared by every method.
pub struct Context {
    pub state: ModelState,
    pub optimizer: OptimizerState,
    pub blocks: LayerBlockLayout,
    pub projection: ProjectionSpec,
    pub moments: SecondMomentBlocks,
    pub epsilon: f32,
}

impl Context {
    pub fn new(cfg: &RunConfig, state: ModelState, optimizer: OptimizerState) -> Result<Self> {
        let blocks = LayerBlockLayout::new(&state.config, cfg.projection.layer_blocks)?;
        let projection = ProjectionSpec::new(cfg.projection.seed, cfg.projection.block_dim, &blocks)?;
        let moments = SecondMomentBlocks::from_optimizer(&state, &optimizer, &blocks)?;
        Ok(Context { state, optimizer, blocks, projection, moments, epsilon: cfg.projection.epsilon })
    }

    pub fn artifacts(&self) -> MethodArtifacts<'_> {
        MethodArtifacts {
            state: &self.state,
            blocks: &self.blocks,
            projection: &self.projection,
            moments: Some(&self.moments),
            epsilon: self.epsilon,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.dim()
    }

    /// Projected (pre-whitening) features of `examples` for one kind.
    pub fn project(&self, kind: FeatureKind, examples: &[ExampleRecord]) -> Result<Vec<Featurized>> {
        let f = Featurizer {
            state: &self.state,
            blocks: &self.blocks,
            projection: &self.projection,
            moments: kind.use_optimizer_correction.then_some(&self.moments),
            hessian: None,
            options: crate::gradfeat::FeatureOptions {
                output_fn: kind.output_fn,
                weighting: kind.weighting,
                use_optimizer_correction: kind.use_optimizer_correction,
                use_unit_norm: false,
                epsilon: self.epsilon,
            },
        };
        f.validate()?;
        examples.par_iter().map(|ex| f.projected(ex)).collect()
    }

    pub fn fingerprint(&self, method: &MethodConfig) -> String {
        method.fingerprint(self.projection.seed(), self.dim())
    }
}

/// Greedy completions of every fact prompt, stopping at a period or EOS.
pub fn predictions(state: &ModelState, bench: &Benchmark) -> Result<Vec<Vec<u32>>> {
    let stop: Vec<u32> = bench.vocab.id(".").into_iter().chain([EOS]).collect();
    bench
        .facts
        .par_iter()
        .map(|f| {
            let (prompt, _) = bench.encode_query(&f.prompt, &f.target);
            tinylm::greedy_decode(state, &prompt, 8, &stop)
        })
        .collect()
}

/// Queries used for the evaluation-side Hessian. With model targets an
/// empty prediction falls back to the ground-truth target.
pub fn eval_examples(cfg: &RunConfig, bench: &Benchmark, predictions: &[Vec<u32>]) -> Vec<ExampleRecord> {
    bench
        .facts
        .iter()
        .zip(predictions)
        .map(|(f, pred)| {
            let (prompt, target) = bench.encode_query(&f.prompt, &f.target);
            let target = match cfg.hessian.eval_targets {
                EvalTargets::Model if !pred.is_empty() => pred.clone(),
                _ => target,
            };
            ExampleRecord::completion(f.query_id(), &prompt, &target)
        })
        .collect()
}

pub fn vectors(f: &[Featurized]) -> Vec<FeatureVector> {
    f.iter().map(|x| x.vector.clone()).collect()
}

/// Estimated Hessians with cached inverse square roots.
#[derive(Clone, Debug)]
pub struct HessianSet {
    pub train: BTreeMap<FeatureKind, HessianBlocks>,
    pub mixed: Option<HessianBlocks>,
    pub lambda: Option<LambdaChoice>,
}

impl HessianSet {
    pub fn for_method(&self, m: &MethodConfig) -> Option<&HessianBlocks> {
        match m.hessian_mode {
            HessianMode::None => None,
            HessianMode::Train => self.train.get(&m.feature_kind()),
            HessianMode::Mixed(_) => self.mixed.as_ref(),
        }
    }

    /// The mixing weight actually used (fixed or selected).
    pub fn lambda_value(&self) -> Option<f64> {
        match self.mixed.as_ref().map(|h| h.provenance.source) {
            Some(Source::Mixed { lambda }) => Some(lambda),
            _ => None,
        }
    }
}

/// Feature kinds needed by `presets`.
pub fn kinds(presets: &[Preset]) -> Vec<FeatureKind> {
    let mut out: Vec<FeatureKind> = presets.iter().map(|p| p.config(0.0).feature_kind()).collect();
    out.sort();
    out.dedup();
    out
}

fn tagged(mut h: HessianBlocks, cfg: &RunConfig, rank: usize) -> HessianBlocks {
    h.provenance.tag = cfg.stage_tag(Stage::Features);
    h.provenance.projection_seed = cfg.projection.seed;
    h.provenance.crossover_rank = rank as u32;
    h
}

/// `R_train` for every kind whose presets whiten, and the mixed Hessian for
/// TrackStar from `R_train` and the evaluation-query `R_eval` of its kind.
pub fn estimate_hessians(
    cfg: &RunConfig,
    presets: &[Preset],
    corpus: &BTreeMap<FeatureKind, Vec<Featurized>>,
    eval_queries: Option<&[Featurized]>,
) -> Result<HessianSet> {
    let dims = corpus.values().next().map(|v| v.first().map(|f| f.vector.values.len()).unwrap_or(0)).unwrap_or(0);
    let rank = cfg.crossover_rank(dims);
    let mut train = BTreeMap::new();
    let mut mixed = None;
    let mut lambda = None;
    for p in presets {
        let m = p.config(0.0);
        if m.hessian_mode == HessianMode::None {
            continue;
        }
        let kind = m.feature_kind();
        let rows = corpus.get(&kind).ok_or_else(|| Error::MissingArtifact {
            name: format!("projected features for {kind}"),
            producer: "build-index".into(),
        })?;
        let block_dims = vec![cfg.projection.block_dim; dims / cfg.projection.block_dim];
        if !train.contains_key(&kind) {
            let r = estimate_r(rows.iter().map(|f| &f.vector), &block_dims, Source::Train)?;
            train.insert(kind, tagged(r, cfg, rank));
        }
        if matches!(m.hessian_mode, HessianMode::Mixed(_)) && mixed.is_none() {
            let queries = eval_queries.ok_or_else(|| Error::MissingArtifact {
                name: "evaluation query features".into(),
                producer: "estimate-hessian".into(),
            })?;
            let r_eval = tagged(estimate_r(queries.iter().map(|f| &f.vector), &block_dims, Source::Eval)?, cfg, rank);
            let r_train = &train[&kind];
            let l = match cfg.hessian.lambda {
                Some(l) => l,
                None => {
                    let choice = select_lambda(r_train, &r_eval, rank, &cfg.hessian.lambda_grid)?;
                    lambda = Some(choice);
                    choice.lambda
                }
            };
            mixed = Some(tagged(mix(r_train, &r_eval, l)?, cfg, rank).inverse_sqrt(cfg.hessian.damping)?.to_stored_precision());
        }
    }
    let train = train
        .into_iter()
        .map(|(k, h)| Ok((k, h.inverse_sqrt(cfg.hessian.damping)?.to_stored_precision())))
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(HessianSet { train, mixed, lambda })
}

/// Method configurations with the mixing weight filled in.
pub fn method_configs(presets: &[Preset], hessians: &HessianSet) -> Vec<(Preset, MethodConfig)> {
    let lambda = hessians.lambda_value().unwrap_or(0.0);
    presets.iter().map(|&p| (p, p.config(lambda))).collect()
}

/// Whitening and normalization applied to projected vectors.
pub fn finish_vectors(method: &MethodConfig, hessian: Option<&HessianBlocks>, projected: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
    let whitened = match (method.hessian_mode, hessian) {
        (HessianMode::None, _) => projected.to_vec(),
        (_, Some(h)) => h.whiten_all(projected)?,
        (mode, None) => {
            return Err(Error::MissingArtifact {
                name: format!("{mode} Hessian for {}", method.feature_kind()),
                producer: "estimate-hessian".into(),
            })
        }
    };
    if method.use_unit_norm {
        whitened.par_iter().map(normalize).collect()
    } else {
        Ok(whitened)
    }
}

/// Index rows for one method, in corpus order.
pub fn method_index(
    ctx: &Context,
    cfg: &RunConfig,
    method: &MethodConfig,
    hessian: Option<&HessianBlocks>,
    projected: &[Featurized],
    offsets: Option<&[(u64, u64)]>,
) -> Result<FeatureIndex> {
    let finished = finish_vectors(method, hessian, &vectors(projected))?;
    let header = IndexHeader {
        fingerprint: ctx.fingerprint(method),
        block_dims: ctx.projection.block_dims(),
        tag: cfg.stage_tag(Stage::Index),
    };
    let mut data = Vec::with_capacity(finished.len() * ctx.dim());
    let mut rows = Vec::with_capacity(finished.len());
    for (i, (v, f)) in finished.iter().zip(projected).enumerate() {
        if !v.is_finite() {
            return Err(Error::InvalidExample { id: v.example_id, reason: "non-finite feature vector".into() });
        }
        data.extend_from_slice(&v.values);
        let (offset, len) = offsets.map_or((None, None), |o| (Some(o[i].0), Some(o[i].1)));
        rows.push(RowMeta { id: v.example_id, offset, len, mean_p: f.mean_probability });
    }
    FeatureIndex::from_rows(header, rows, data)
}

/// Top-`k` retrieval for already finished query vectors.
pub fn retrieve_all(index: &FeatureIndex, method: &MethodConfig, queries: &[FeatureVector], k: usize) -> Result<Vec<RetrievalResult>> {
    let multipliers = method.trak_example_level_q.then(|| index.trak_multipliers());
    let fingerprint = index.fingerprint().to_string();
    queries
        .par_iter()
        .map(|q| {
            index.retrieve_with(q, &fingerprint, k, RetrieveOptions { multipliers: multipliers.as_deref(), shard_rows: None })
        })
        .collect()
}

/// BM25 over passage text; each query is the prompt followed by the target.
pub fn bm25_retrievals(cfg: &RunConfig, bench: &Benchmark) -> Result<(String, Vec<RetrievalResult>)> {
    let index = Bm25Index::build(cfg.method.bm25, bench.passages.iter().map(|p| (p.id, p.text.as_str())))?;
    let results = bench
        .facts
        .par_iter()
        .map(|f| index.retrieve(f.query_id(), &format!("{} {}", f.prompt, f.target), cfg.method.k).map(|r| r.result))
        .collect::<Result<Vec<_>>>()?;
    Ok((cfg.method.bm25.fingerprint(), results))
}

/// Uniformly random passages as a retrieval baseline, seeded per query.
pub fn random_retrievals(cfg: &RunConfig, bench: &Benchmark) -> Vec<RetrievalResult> {
    let ids: Vec<ExampleId> = bench.passages.iter().map(|p| p.id).collect();
    bench
        .facts
        .iter()
        .map(|f| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed ^ 0x7261_6e64);
            rng.set_stream(f.id);
            let picked: Vec<ExampleId> = ids.choose_multiple(&mut rng, cfg.method.k.min(ids.len())).copied().collect();
            RetrievalResult {
                query_id: f.query_id(),
                fingerprint: "random".into(),
                hits: picked.into_iter().enumerate().map(|(i, id)| Hit { example_id: id, score: 0.0, rank: i + 1 }).collect(),
                truncated: cfg.method.k > ids.len(),
            }
        })
        .collect()
}

/// Fact indices used for tail-patching, in fact order.
pub fn tailpatch_sample(cfg: &RunConfig, bench: &Benchmark) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..bench.facts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed ^ 0x7461_696c);
    idx.shuffle(&mut rng);
    idx.truncate(cfg.eval.tailpatch_queries);
    idx.sort();
    idx
}

/// Tail-patch results for the top proponents of each sampled query.
pub fn tailpatch_retrievals(
    cfg: &RunConfig,
    bench: &Benchmark,
    state: &ModelState,
    optimizer: &OptimizerState,
    corpus: &[ExampleRecord],
    retrievals: &[RetrievalResult],
    sample: &[usize],
) -> Result<TailPatchReport> {
    let queries: Vec<TailPatchQuery> = sample
        .iter()
        .map(|&i| {
            let f = &bench.facts[i];
            let (prompt, target) = bench.encode_query(&f.prompt, &f.target);
            TailPatchQuery { id: f.query_id(), prompt, target }
        })
        .collect();
    let depth = *cfg.eval.tailpatch_ks.iter().max().expect("validated");
    let proponents: Vec<Vec<&ExampleRecord>> = sample
        .iter()
        .map(|&i| {
            retrievals[i]
                .hits
                .iter()
                .take(depth)
                .map(|h| corpus.get(h.example_id.0 as usize).filter(|e| e.id == h.example_id).ok_or(Error::InvalidExample {
                    id: h.example_id,
                    reason: "retrieved id is not in the corpus".into(),
                }))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    tail_patch_eval(state, optimizer, &optimizer.hyper, &queries, &proponents, &cfg.eval.tailpatch_ks)
}

/// Everything produced by [`run`].
pub struct RunOutput {
    pub bench: Benchmark,
    pub report: EvalReport,
    pub retrievals: BTreeMap<String, Vec<RetrievalResult>>,
    pub losses: Vec<f64>,
    pub context: Context,
    pub hessians: HessianSet,
}

/// Shared evaluation over per-method retrievals (in fact order). Methods
/// listed in `eval.tailpatch_presets` plus the random and BM25 baselines
/// are tail-patched on the same query sample.
pub fn evaluate(
    cfg: &RunConfig,
    bench: &Benchmark,
    ctx: &Context,
    predictions: &[Vec<u32>],
    methods: &[(String, String, Vec<RetrievalResult>)],
    lambda: Option<f64>,
) -> Result<EvalReport> {
    let texts: Vec<String> = predictions.iter().map(|p| bench.vocab.decode(p)).collect();
    let (correct, _) = split_by_correctness(&bench.facts, &texts);
    let correct: HashSet<u64> = correct.into_iter().collect();
    let corpus = bench.corpus_examples();
    let sample = tailpatch_sample(cfg, bench);
    let patched: Vec<&str> = cfg
        .eval
        .tailpatch_presets
        .iter()
        .map(|p| p.as_str())
        .chain(cfg.eval.tailpatch_random.then_some("random"))
        .chain(cfg.eval.tailpatch_bm25.then_some("bm25"))
        .collect();
    let mut rows = Vec::with_capacity(methods.len());
    for (name, fingerprint, retrievals) in methods {
        let mut row =
            MethodReport::from_retrievals(name, fingerprint, bench, retrievals, &correct, cfg.eval.mrr_cap, cfg.eval.recall_k)?;
        if !sample.is_empty() && patched.contains(&name.as_str()) {
            row.tail_patch =
                Some(tailpatch_retrievals(cfg, bench, &ctx.state, &ctx.optimizer, &corpus, retrievals, &sample)?);
        }
        rows.push(row);
    }
    Ok(EvalReport {
        config_hash: cfg.stage_hash(Stage::Eval),
        passages: bench.passages.len(),
        facts: bench.facts.len(),
        accuracy: correct.len() as f64 / bench.facts.len() as f64,
        lambda,
        mrr_cap: cfg.eval.mrr_cap,
        recall_k: cfg.eval.recall_k,
        methods: rows,
    })
}

/// Full pipeline in memory: generate, train, featurize, estimate Hessians,
/// index every preset, retrieve and evaluate.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let bench = crate::facttrace::generate_benchmark(&cfg.benchmark)?;
    let trained = train(cfg, &bench)?;
    let losses = trained.losses;
    let ctx = Context::new(cfg, trained.state, trained.optimizer)?;
    let corpus = bench.corpus_examples();
    let queries = bench.query_examples();
    let preds = predictions(&ctx.state, &bench)?;

    let presets = &cfg.method.presets;
    let mut corpus_feats = BTreeMap::new();
    let mut query_feats = BTreeMap::new();
    for kind in kinds(presets) {
        corpus_feats.insert(kind, ctx.project(kind, &corpus)?);
        query_feats.insert(kind, ctx.project(kind, &queries)?);
    }
    let eval_feats = match presets.iter().find(|p| matches!(p.config(0.0).hessian_mode, HessianMode::Mixed(_))) {
        Some(p) => {
            let kind = p.config(0.0).feature_kind();
            match cfg.hessian.eval_targets {
                EvalTargets::GroundTruth => query_feats.get(&kind).cloned(),
                EvalTargets::Model => Some(ctx.project(kind, &eval_examples(cfg, &bench, &preds))?),
            }
        }
        None => None,
    };
    let hessians = estimate_hessians(cfg, presets, &corpus_feats, eval_feats.as_deref())?;

    let mut methods = Vec::new();
    for (preset, m) in method_configs(presets, &hessians) {
        let h = hessians.for_method(&m);
        let kind = m.feature_kind();
        let index = method_index(&ctx, cfg, &m, h, &corpus_feats[&kind], None)?;
        let q = finish_vectors(&m, h, &vectors(&query_feats[&kind]))?;
        let r = retrieve_all(&index, &m, &q, cfg.method.k)?;
        methods.push((preset.as_str().to_string(), index.fingerprint().to_string(), r));
    }
    let (bm25_fp, bm25) = bm25_retrievals(cfg, &bench)?;
    methods.push(("bm25".into(), bm25_fp, bm25));
    methods.push(("random".into(), "random".into(), random_retrievals(cfg, &bench)));

    let report = evaluate(cfg, &bench, &ctx, &preds, &methods, hessians.lambda_value())?;
    let retrievals = methods.into_iter().map(|(n, _, r)| (n, r)).collect();
    Ok(RunOutput { bench, report, retrievals, losses, context: ctx, hessians })
}
