//! Evaluation report: one row per method with overall, per-bucket and
//! per-correctness retrieval metrics and tail-patch results.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{mrr, recall_at_k};
use super::{categorize_proponent, Benchmark, Category, TailPatchReport};
use crate::index::RetrievalResult;
use crate::{ExampleId, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub group: String,
    pub queries: usize,
    pub mrr: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub fingerprint: String,
    pub mrr: f64,
    pub recall: f64,
    pub tail_patch: Option<TailPatchReport>,
    pub by_bucket: Vec<BreakdownRow>,
    pub by_correctness: Vec<BreakdownRow>,
    /// Mean share of each category among the top `recall_k` proponents.
    pub categories: BTreeMap<Category, f64>,
}

impl MethodReport {
    /// Retrieval metrics for one method. `retrievals` follow fact order and
    /// `correct` holds the facts the model predicts correctly.
    pub fn from_retrievals(
        method: &str,
        fingerprint: &str,
        bench: &Benchmark,
        retrievals: &[RetrievalResult],
        correct: &HashSet<u64>,
        cap: usize,
        recall_k: usize,
    ) -> Result<Self> {
        let truth = bench.truth_sets();
        let breakdown = |group: String, keep: &dyn Fn(usize) -> bool| -> Result<Option<BreakdownRow>> {
            let idx: Vec<usize> = (0..bench.facts.len()).filter(|&i| keep(i)).collect();
            if idx.is_empty() {
                return Ok(None);
            }
            let r: Vec<RetrievalResult> = idx.iter().map(|&i| retrievals[i].clone()).collect();
            let t: Vec<HashSet<ExampleId>> = idx.iter().map(|&i| truth[i].clone()).collect();
            Ok(Some(BreakdownRow { group, queries: idx.len(), mrr: mrr(&r, &t, cap)?, recall: recall_at_k(&r, &t, recall_k)? }))
        };

        let mut labels: Vec<&str> = Vec::new();
        for f in &bench.facts {
            if !labels.contains(&f.bucket.as_str()) {
                labels.push(&f.bucket);
            }
        }
        let mut by_bucket = Vec::new();
        for label in labels {
            by_bucket.extend(breakdown(label.to_string(), &|i| bench.facts[i].bucket == label)?);
        }
        let mut by_correctness = Vec::new();
        by_correctness.extend(breakdown("correct".into(), &|i| correct.contains(&bench.facts[i].id))?);
        by_correctness.extend(breakdown("incorrect".into(), &|i| !correct.contains(&bench.facts[i].id))?);

        let mut categories: BTreeMap<Category, f64> = Category::ALL.iter().map(|&c| (c, 0.0)).collect();
        for (fact, r) in bench.facts.iter().zip(retrievals) {
            let top: Vec<_> = r.hits.iter().take(recall_k).collect();
            for h in &top {
                if let Some(p) = bench.passage(h.example_id) {
                    *categories.get_mut(&categorize_proponent(p, fact)).expect("all categories") += 1.0 / top.len() as f64;
                }
            }
        }
        for v in categories.values_mut() {
            *v /= bench.facts.len() as f64;
        }

        Ok(MethodReport {
            method: method.to_string(),
            fingerprint: fingerprint.to_string(),
            mrr: mrr(retrievals, &truth, cap)?,
            recall: recall_at_k(retrievals, &truth, recall_k)?,
            tail_patch: None,
            by_bucket,
            by_correctness,
            categories,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub passages: usize,
    pub facts: usize,
    /// Fraction of facts the model completes correctly.
    pub accuracy: f64,
    pub lambda: Option<f64>,
    pub mrr_cap: usize,
    pub recall_k: usize,
    pub methods: Vec<MethodReport>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// A summary line followed by one line per method.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut summary = serde_json::to_value(self)?;
        summary.as_object_mut().expect("struct").remove("methods");
        let mut out = serde_json::to_string(&summary)?;
        out.push('\n');
        for m in &self.methods {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut summary: serde_json::Value =
            serde_json::from_str(lines.next().ok_or(crate::Error::Empty("report"))?)?;
        let methods: Vec<serde_json::Value> = lines.map(serde_json::from_str).collect::<Result<_, _>>()?;
        summary.as_object_mut().expect("object").insert("methods".into(), serde_json::Value::Array(methods));
        Ok(serde_json::from_value(summary)?)
    }

    /// Fixed-width table with one row per method.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let ks: Vec<usize> = self
            .methods
            .iter()
            .find_map(|m| m.tail_patch.as_ref().map(|t| t.ks.clone()))
            .unwrap_or_default();
        let _ = write!(out, "{:<12} {:>7} {:>7}", "method", "MRR", format!("R@{}", self.recall_k));
        for k in &ks {
            let _ = write!(out, " {:>10}", format!("TP@{k} pp"));
        }
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{:<12} {:>7.3} {:>7.3}", m.method, m.mrr, m.recall);
            for k in &ks {
                match m.tail_patch.as_ref().and_then(|t| t.at(*k)) {
                    Some(v) => {
                        let _ = write!(out, " {:>+10.3}", v);
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\n{} facts, {} passages, model accuracy {:.3}{}",
            self.facts,
            self.passages,
            self.accuracy,
            self.lambda.map(|l| format!(", lambda {l}")).unwrap_or_default()
        );
        out
    }
}
