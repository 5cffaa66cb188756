//! Okapi BM25 over casefolded, stopword-filtered words.
//!
//! `score(q, D) = sum over query words t (repeats counted) of
//! idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |D| / avgdl))`
//! with `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`. `|D|` is the exact
//! number of indexed words of the document.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::index::{hits_from, top_k, RetrievalResult, Scored};
use crate::text;
use crate::{Error, ExampleId, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    /// Drop words in the built-in stopword list.
    pub remove_stopwords: bool,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75, remove_stopwords: true }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!(
                "bm25 needs k1 > 0 and 0 <= b <= 1, got k1 = {}, b = {}",
                self.k1, self.b
            )));
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        if self.remove_stopwords {
            text::content_words(text)
        } else {
            text::words(text)
        }
    }

    pub fn fingerprint(&self) -> String {
        format!("bm25;k1={};b={};stop={}", self.k1, self.b, self.remove_stopwords as u8)
    }
}

#[derive(Clone, Debug)]
struct Doc {
    id: ExampleId,
    tf: HashMap<String, u32>,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Doc>,
    df: HashMap<String, u32>,
    avgdl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Result {
    pub result: RetrievalResult,
    /// The query had no words left after tokenization.
    pub empty_query: bool,
}

impl Bm25Index {
    pub fn build<'a>(params: Bm25Params, docs: impl IntoIterator<Item = (ExampleId, &'a str)>) -> Result<Self> {
        params.validate()?;
        let mut df: HashMap<String, u32> = HashMap::new();
        let docs: Vec<Doc> = docs
            .into_iter()
            .map(|(id, text)| {
                let words = params.tokenize(text);
                let mut tf: HashMap<String, u32> = HashMap::new();
                for w in &words {
                    *tf.entry(w.clone()).or_default() += 1;
                }
                for w in tf.keys() {
                    *df.entry(w.clone()).or_default() += 1;
                }
                Doc { id, tf, len: words.len() }
            })
            .collect();
        if docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let avgdl = docs.iter().map(|d| d.len as f64).sum::<f64>() / docs.len() as f64;
        Ok(Bm25Index { params, docs, df, avgdl })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn params(&self) -> &Bm25Params {
        &self.params
    }

    pub fn idf(&self, word: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(word).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn score_doc(&self, doc: &Doc, query: &[String]) -> f64 {
        let Bm25Params { k1, b, .. } = self.params;
        let norm = if self.avgdl > 0.0 { 1.0 - b + b * doc.len as f64 / self.avgdl } else { 1.0 };
        query
            .iter()
            .map(|w| {
                let tf = doc.tf.get(w).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(w) * tf * (k1 + 1.0) / (tf + k1 * norm)
                }
            })
            .sum()
    }

    /// Score of every document, in build order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let q = self.params.tokenize(query);
        self.docs.par_iter().map(|d| self.score_doc(d, &q)).collect()
    }

    pub fn retrieve(&self, query_id: ExampleId, query: &str, k: usize) -> Result<Bm25Result> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let q = self.params.tokenize(query);
        let empty_query = q.is_empty();
        let best = if empty_query {
            Vec::new()
        } else {
            let scores: Vec<f64> = self.docs.par_iter().map(|d| self.score_doc(d, &q)).collect();
            top_k(self.docs.iter().zip(scores).map(|(d, score)| Scored { score, id: d.id }), k.min(self.len()))
        };
        Ok(Bm25Result {
            result: RetrievalResult {
                query_id,
                fingerprint: self.params.fingerprint(),
                hits: hits_from(best),
                truncated: k > self.len(),
            },
            empty_query,
        })
    }
}
