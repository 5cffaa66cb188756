//! Pipeline subcommands over the artifact store.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use tracing::info;

use trackstar::config::{EvalTargets, RunConfig};
use trackstar::facttrace::{generate_benchmark, EvalReport};
use trackstar::methods::HessianMode;
use trackstar::pipeline::{self, Context};
use trackstar::tinylm::Checkpoint;
use trackstar::Preset;

use crate::artifacts::Store;
use crate::session::{QueryRequest, Session, TailPatchQuery, TailPatchRequest, TailPatchResponse};

/// What a subcommand did with its outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Built,
    UpToDate,
}

fn skip(force: bool, current: Result<bool>) -> Result<bool> {
    if force {
        return Ok(false);
    }
    current
}

pub fn gen_data(store: &Store, cfg: &RunConfig, force: bool) -> Result<Outcome> {
    if skip(force, store.data_current(cfg))? {
        return Ok(Outcome::UpToDate);
    }
    let bench = generate_benchmark(&cfg.benchmark)?;
    store.save_data(cfg, &bench)?;
    info!(passages = bench.passages.len(), facts = bench.facts.len(), vocab = bench.vocab.size(), "generated benchmark");
    Ok(Outcome::Built)
}

pub fn train(store: &Store, cfg: &RunConfig, force: bool) -> Result<Outcome> {
    if skip(force, store.model_current(cfg))? {
        return Ok(Outcome::UpToDate);
    }
    let data = store.load_data(cfg)?;
    let out = pipeline::train(cfg, &data.bench)?;
    let first = out.losses.first().copied().unwrap_or(f64::NAN);
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    info!(steps = out.losses.len(), first_loss = first, last_loss = last, "trained model");
    store.save_model(&Checkpoint { state: out.state, optimizer: out.optimizer, tag: cfg.stage_tag(trackstar::config::Stage::Model) })?;
    Ok(Outcome::Built)
}

/// Projects the corpus for every feature kind and estimates the Hessians.
pub fn estimate_hessian(store: &Store, cfg: &RunConfig, force: bool) -> Result<Outcome> {
    if skip(force, store.hessians_current(cfg))? {
        return Ok(Outcome::UpToDate);
    }
    let data = store.load_data(cfg)?;
    let ckpt = store.load_model(cfg)?;
    let ctx = Context::new(cfg, ckpt.state, ckpt.optimizer)?;
    let corpus = data.bench.corpus_examples();
    let presets = &cfg.method.presets;
    let mut feats = BTreeMap::new();
    for kind in pipeline::kinds(presets) {
        let f = ctx.project(kind, &corpus)?;
        store.save_projected(cfg, kind, &f)?;
        info!(%kind, rows = f.len(), dim = ctx.dim(), "projected corpus features");
        feats.insert(kind, f);
    }
    let eval = match presets.iter().map(|p| p.config(0.0)).find(|m| matches!(m.hessian_mode, HessianMode::Mixed(_))) {
        Some(m) => {
            let examples = match cfg.hessian.eval_targets {
                EvalTargets::GroundTruth => data.bench.query_examples(),
                EvalTargets::Model => {
                    let preds = pipeline::predictions(&ctx.state, &data.bench)?;
                    pipeline::eval_examples(cfg, &data.bench, &preds)
                }
            };
            Some(ctx.project(m.feature_kind(), &examples)?)
        }
        None => None,
    };
    let set = pipeline::estimate_hessians(cfg, presets, &feats, eval.as_deref())?;
    if let Some(l) = set.lambda {
        info!(lambda = l.lambda, exact = l.exact, "selected mixing weight");
    }
    store.save_hessians(cfg, &set)?;
    Ok(Outcome::Built)
}

pub fn build_index(store: &Store, cfg: &RunConfig, force: bool) -> Result<Outcome> {
    let mut pending = Vec::new();
    for &p in &cfg.method.presets {
        if !skip(force, store.index_current(cfg, p))? {
            pending.push(p);
        }
    }
    if pending.is_empty() {
        return Ok(Outcome::UpToDate);
    }
    let data = store.load_data(cfg)?;
    let ckpt = store.load_model(cfg)?;
    let ctx = Context::new(cfg, ckpt.state, ckpt.optimizer)?;
    let hessians = store.load_hessians(cfg)?;
    let configs = pipeline::method_configs(&pending, &hessians);
    for kind in pipeline::kinds(&pending) {
        let projected = store.load_projected(cfg, kind)?;
        if projected.len() != data.offsets.len() {
            bail!("projected features have {} rows but the corpus has {}", projected.len(), data.offsets.len());
        }
        for (p, m) in configs.iter().filter(|(_, m)| m.feature_kind() == kind) {
            let idx = pipeline::method_index(&ctx, cfg, m, hessians.for_method(m), &projected, Some(&data.offsets))?;
            store.save_index(*p, &idx)?;
            info!(preset = p.as_str(), rows = idx.len(), fingerprint = idx.fingerprint(), "built index");
        }
    }
    Ok(Outcome::Built)
}

/// Retrieval for every benchmark fact with every preset, plus baselines,
/// followed by the shared evaluation. Writes `report.jsonl` and `report.txt`.
pub fn eval(store: &Store, cfg: &RunConfig, force: bool) -> Result<(Outcome, EvalReport)> {
    if !force {
        if let Some(r) = store.load_report(cfg)? {
            return Ok((Outcome::UpToDate, r));
        }
    }
    let data = store.load_data(cfg)?;
    let bench = &data.bench;
    let ckpt = store.load_model(cfg)?;
    let ctx = Context::new(cfg, ckpt.state, ckpt.optimizer)?;
    let hessians = store.load_hessians(cfg)?;
    let preds = pipeline::predictions(&ctx.state, bench)?;
    let queries = bench.query_examples();
    let mut query_feats = BTreeMap::new();
    for kind in pipeline::kinds(&cfg.method.presets) {
        query_feats.insert(kind, ctx.project(kind, &queries)?);
    }
    let mut methods = Vec::new();
    for (p, m) in pipeline::method_configs(&cfg.method.presets, &hessians) {
        let idx = store.load_index(cfg, p)?;
        let expected = ctx.fingerprint(&m);
        if idx.fingerprint() != expected {
            bail!("index for `{p}` has fingerprint `{}`, expected `{expected}`", idx.fingerprint());
        }
        let h = hessians.for_method(&m);
        let q = pipeline::finish_vectors(&m, h, &pipeline::vectors(&query_feats[&m.feature_kind()]))?;
        methods.push((p.as_str().to_string(), idx.fingerprint().to_string(), pipeline::retrieve_all(&idx, &m, &q, cfg.method.k)?));
    }
    let (bm25_fp, bm25) = pipeline::bm25_retrievals(cfg, bench)?;
    methods.push(("bm25".into(), bm25_fp, bm25));
    methods.push(("random".into(), "random".into(), pipeline::random_retrievals(cfg, bench)));
    let report = pipeline::evaluate(cfg, bench, &ctx, &preds, &methods, hessians.lambda_value())?;
    store.save_report(&report)?;
    Ok((Outcome::Built, report))
}

/// Runs every stage in order, skipping current artifacts.
pub fn run_all(store: &Store, cfg: &RunConfig, force: bool) -> Result<EvalReport> {
    gen_data(store, cfg, force)?;
    train(store, cfg, force)?;
    estimate_hessian(store, cfg, force)?;
    build_index(store, cfg, force)?;
    Ok(eval(store, cfg, force)?.1)
}

/// One line of a query file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryLine {
    #[serde(default)]
    pub id: Option<String>,
    pub prompt: String,
    #[serde(default)]
    pub target: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRow {
    pub query: String,
    pub preset: Preset,
    pub target: String,
    pub rank: usize,
    pub example_id: u64,
    pub score: f64,
}

pub fn read_query_lines(input: impl BufRead) -> Result<Vec<QueryLine>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("query file line {}", i + 1))?);
    }
    Ok(out)
}

/// Top-`k` proponents for each query line, one row per hit.
pub fn retrieve(store: &Store, cfg: &RunConfig, preset: Preset, queries: &[QueryLine], k: usize) -> Result<Vec<RetrievedRow>> {
    let session = Session::load(store, cfg, &[preset])?;
    let mut rows = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        let req = QueryRequest { prompt: q.prompt.clone(), target: q.target.clone(), preset: Some(preset), k: Some(k), fingerprint: None };
        let resp = session.query(&req).with_context(|| format!("query {}", i + 1))?;
        let name = q.id.clone().unwrap_or_else(|| (i + 1).to_string());
        rows.extend(resp.proponents.iter().map(|p| RetrievedRow {
            query: name.clone(),
            preset,
            target: resp.target.clone(),
            rank: p.rank,
            example_id: p.example_id,
            score: p.score,
        }));
    }
    Ok(rows)
}

/// Tail-patch what-ifs of single passages for one query.
pub fn tailpatch(
    store: &Store,
    cfg: &RunConfig,
    query: TailPatchQuery,
    example_ids: &[u64],
    learning_rate: Option<f64>,
) -> Result<Vec<TailPatchResponse>> {
    let session = Session::load(store, cfg, &[])?;
    example_ids
        .iter()
        .map(|&id| {
            let req = TailPatchRequest { query: query.clone(), example_id: id, learning_rate };
            session.tailpatch(&req).map_err(anyhow::Error::from)
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(mut out: impl Write, rows: &[T]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
