use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::prediction_matches;
use super::FactRecord;
use crate::index::RetrievalResult;
use crate::tinylm::{self, ExampleRecord, ModelState, OptimizerState, TrainHyper};
use crate::{Error, ExampleId, Result};

fn check_inputs(retrievals: &[RetrievalResult], truth: &[HashSet<ExampleId>], depth: usize) -> Result<()> {
    if retrievals.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if retrievals.len() != truth.len() {
        return Err(Error::shape("truth sets", retrievals.len(), truth.len()));
    }
    if let Some(r) = retrievals.iter().find(|r| r.hits.len() < depth && !r.truncated) {
        return Err(Error::InvalidConfig(format!(
            "retrieval for query {} has {} ranks, fewer than the cutoff {depth}",
            r.query_id,
            r.hits.len()
        )));
    }
    Ok(())
}

/// `1/rank` of the first entailing hit within the top `cap`, else 0.
pub fn reciprocal_rank(result: &RetrievalResult, truth: &HashSet<ExampleId>, cap: usize) -> f64 {
    result
        .hits
        .iter()
        .take(cap)
        .position(|h| truth.contains(&h.example_id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

/// Mean reciprocal rank over queries, capped at `cap` ranks.
pub fn mrr(retrievals: &[RetrievalResult], truth: &[HashSet<ExampleId>], cap: usize) -> Result<f64> {
    check_inputs(retrievals, truth, cap)?;
    let sum: f64 = retrievals.iter().zip(truth).map(|(r, t)| reciprocal_rank(r, t, cap)).sum();
    Ok(sum / retrievals.len() as f64)
}

/// Fraction of queries with an entailing hit in the top `k`.
pub fn recall_at_k(retrievals: &[RetrievalResult], truth: &[HashSet<ExampleId>], k: usize) -> Result<f64> {
    check_inputs(retrievals, truth, k)?;
    let hits = retrievals
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.hits.iter().take(k).any(|h| t.contains(&h.example_id)))
        .count();
    Ok(hits as f64 / retrievals.len() as f64)
}

/// Partitions fact ids by whether the prediction names the object.
pub fn split_by_correctness(facts: &[FactRecord], predictions: &[String]) -> (Vec<u64>, Vec<u64>) {
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (i, f) in facts.iter().enumerate() {
        let ok = predictions.get(i).is_some_and(|p| prediction_matches(p, &f.object));
        if ok {
            correct.push(f.id);
        } else {
            incorrect.push(f.id);
        }
    }
    (correct, incorrect)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TailPatchQuery {
    pub id: ExampleId,
    /// Starts with BOS.
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPatchReport {
    pub ks: Vec<usize>,
    /// Mean change of target-sequence probability, in percentage points.
    pub absolute_pp: Vec<f64>,
    /// Mean change relative to the probability before the step, in percent.
    pub relative_pct: Vec<f64>,
    pub queries: usize,
    /// Probability change for each query and proponent, in probability units.
    #[serde(skip)]
    pub deltas: Vec<Vec<f64>>,
    #[serde(skip)]
    pub before: Vec<f64>,
}

impl TailPatchReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.absolute_pp[i])
    }

    /// Mean over queries of the mean delta of the first `k` proponents, in
    /// probability units.
    pub fn mean_delta(&self, k: usize) -> f64 {
        let per_query = self.deltas.iter().map(|d| d.iter().take(k).sum::<f64>() / d.len().min(k) as f64);
        per_query.sum::<f64>() / self.deltas.len() as f64
    }
}

/// Tail-patch evaluation: for each query and each of its top proponents,
/// one optimizer step on the proponent alone from the frozen snapshot and
/// the resulting change in target probability.
pub fn tail_patch_eval(
    state: &ModelState,
    optimizer: &OptimizerState,
    hyper: &TrainHyper,
    queries: &[TailPatchQuery],
    proponents: &[Vec<&ExampleRecord>],
    ks: &[usize],
) -> Result<TailPatchReport> {
    if queries.is_empty() {
        return Err(Error::Empty("query set"));
    }
    if queries.len() != proponents.len() {
        return Err(Error::shape("proponent lists", queries.len(), proponents.len()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig("tail-patch k values must be positive".into()));
    }
    optimizer.check_layout(&state.layout())?;
    let depth = *ks.iter().max().expect("non-empty");
    if let Some((q, p)) = queries.iter().zip(proponents).find(|(_, p)| p.len() < depth) {
        return Err(Error::InvalidConfig(format!(
            "query {} has {} proponents, tail-patch needs {depth}",
            q.id,
            p.len()
        )));
    }

    let before: Vec<f64> = queries
        .par_iter()
        .map(|q| tinylm::target_probability(state, &q.prompt, &q.target))
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, &ExampleRecord)> = proponents
        .iter()
        .enumerate()
        .flat_map(|(qi, ps)| ps.iter().take(depth).map(move |&p| (qi, p)))
        .collect();
    let after: Vec<f64> = pairs
        .par_iter()
        .map(|&(qi, p)| {
            let patched = tinylm::tail_patch_step(state, optimizer, p, hyper)?;
            tinylm::target_probability(&patched, &queries[qi].prompt, &queries[qi].target)
        })
        .collect::<Result<_>>()?;

    let deltas: Vec<Vec<f64>> = after.chunks(depth).zip(&before).map(|(a, &b)| a.iter().map(|x| x - b).collect()).collect();
    let n = queries.len() as f64;
    let mut absolute_pp = Vec::with_capacity(ks.len());
    let mut relative_pct = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut abs = 0.0;
        let mut rel = 0.0;
        for (d, &b) in deltas.iter().zip(&before) {
            let m = d[..k].iter().sum::<f64>() / k as f64;
            abs += m;
            if b > 0.0 {
                rel += m / b;
            }
        }
        absolute_pp.push(100.0 * abs / n);
        relative_pct.push(100.0 * rel / n);
    }
    Ok(TailPatchReport { ks: ks.to_vec(), absolute_pp, relative_pct, queries: queries.len(), deltas, before })
}
