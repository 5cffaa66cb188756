//! Feature store over candidate examples with exact top-k inner-product
//! retrieval.
//!
//! Rows are float32 and scored with a float32 pairwise dot product, so a
//! row's score does not depend on how the index is sharded. Ranking is a
//! total order: higher score first, then lower example id.

mod build;
mod io;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use build::{build_index, build_index_with, build_sharded, DEFAULT_SHARD_ROWS};
pub use io::{read_index, sidecar_path, write_index};

use crate::gradfeat::FeatureVector;
use crate::{Error, ExampleId, Result};

/// Per-row metadata kept in the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub id: ExampleId,
    /// Byte range of the source record in the corpus file, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<u64>,
    /// Mean target-token probability of the example under the model.
    pub mean_p: f64,
}

/// What produced the rows: layout, method fingerprint and config tag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexHeader {
    pub fingerprint: String,
    pub block_dims: Vec<usize>,
    pub tag: [u8; 16],
}

impl IndexHeader {
    pub fn dim(&self) -> usize {
        self.block_dims.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex {
    header: IndexHeader,
    rows: Vec<RowMeta>,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub example_id: ExampleId,
    pub score: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: ExampleId,
    pub fingerprint: String,
    pub hits: Vec<Hit>,
    /// Set when fewer than the requested `k` rows exist.
    pub truncated: bool,
}

/// Options for [`FeatureIndex::retrieve_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RetrieveOptions<'a> {
    /// Per-row score multipliers (e.g. `1 - mean p`), indexed like the rows.
    pub multipliers: Option<&'a [f32]>,
    /// Rows per parallel shard; `None` scans on the calling thread.
    pub shard_rows: Option<usize>,
}

/// Float32 dot product with pairwise summation.
pub fn pairwise_dot(a: &[f32], b: &[f32]) -> f32 {
    const LEAF: usize = 32;
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= LEAF {
        let mut acc = [0f32; 4];
        let chunks = a.len() / 4;
        for i in 0..chunks {
            for j in 0..4 {
                acc[j] += a[4 * i + j] * b[4 * i + j];
            }
        }
        let mut tail = 0f32;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        return (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    let mid = a.len() / 2;
    pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
}

/// Candidate ordered so that the better candidate compares greater.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Scored {
    pub score: f64,
    pub id: ExampleId,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

/// Keeps the best `k` of a stream using a min-heap of size `k`.
pub(crate) fn top_k(items: impl Iterator<Item = Scored>, k: usize) -> Vec<Scored> {
    let mut heap: BinaryHeap<std::cmp::Reverse<Scored>> = BinaryHeap::with_capacity(k + 1);
    for item in items {
        if heap.len() < k {
            heap.push(std::cmp::Reverse(item));
        } else if let Some(worst) = heap.peek() {
            if item > worst.0 {
                heap.pop();
                heap.push(std::cmp::Reverse(item));
            }
        }
    }
    let mut out: Vec<Scored> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

pub(crate) fn hits_from(best: Vec<Scored>) -> Vec<Hit> {
    best.into_iter().enumerate().map(|(i, s)| Hit { example_id: s.id, score: s.score, rank: i + 1 }).collect()
}

impl FeatureIndex {
    /// Assembles an index from rows already in memory. Ids must be unique.
    pub fn from_rows(header: IndexHeader, rows: Vec<RowMeta>, data: Vec<f32>) -> Result<Self> {
        let d = header.dim();
        if d == 0 {
            return Err(Error::InvalidConfig("index dimension must be positive".into()));
        }
        if data.len() != rows.len() * d {
            return Err(Error::shape("index data length", rows.len() * d, data.len()));
        }
        let mut seen = std::collections::HashSet::with_capacity(rows.len());
        for r in &rows {
            if !seen.insert(r.id) {
                return Err(Error::InvalidExample { id: r.id, reason: "duplicate example id in index".into() });
            }
        }
        Ok(FeatureIndex { header, rows, data })
    }

    /// Index over externally computed embeddings (one vector per example).
    pub fn from_vectors(fingerprint: impl Into<String>, vectors: &[FeatureVector]) -> Result<Self> {
        let d = vectors.first().map(|v| v.values.len()).ok_or(Error::Empty("vector set"))?;
        let mut data = Vec::with_capacity(vectors.len() * d);
        let mut rows = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.values.len() != d {
                return Err(Error::shape("external embedding dimension", d, v.values.len()));
            }
            data.extend_from_slice(&v.values);
            rows.push(RowMeta { id: v.example_id, offset: None, len: None, mean_p: 0.0 });
        }
        let header = IndexHeader { fingerprint: fingerprint.into(), block_dims: vec![d], tag: [0; 16] };
        FeatureIndex::from_rows(header, rows, data)
    }

    pub fn header(&self) -> &IndexHeader {
        &self.header
    }

    pub fn fingerprint(&self) -> &str {
        &self.header.fingerprint
    }

    pub fn dim(&self) -> usize {
        self.header.dim()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[RowMeta] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn position(&self, id: ExampleId) -> Option<usize> {
        self.rows.iter().position(|r| r.id == id)
    }

    /// `1 - mean p` per row, the TRAK score multiplier.
    pub fn trak_multipliers(&self) -> Vec<f32> {
        self.rows.iter().map(|r| (1.0 - r.mean_p) as f32).collect()
    }

    fn check_query(&self, q: &FeatureVector, fingerprint: &str) -> Result<()> {
        if fingerprint != self.header.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.header.fingerprint.clone(),
                query: fingerprint.to_string(),
            });
        }
        if q.values.len() != self.dim() {
            return Err(Error::shape("query dimension", self.dim(), q.values.len()));
        }
        Ok(())
    }

    fn score_row(&self, i: usize, q: &[f32], multipliers: Option<&[f32]>) -> Scored {
        let mut score = pairwise_dot(self.row(i), q);
        if let Some(m) = multipliers {
            score *= m[i];
        }
        Scored { score: score as f64, id: self.rows[i].id }
    }

    /// Score of every row, in row order.
    pub fn scores(&self, q: &FeatureVector, fingerprint: &str, multipliers: Option<&[f32]>) -> Result<Vec<f32>> {
        self.check_query(q, fingerprint)?;
        self.check_multipliers(multipliers)?;
        Ok((0..self.len()).into_par_iter().map(|i| self.score_row(i, &q.values, multipliers).score as f32).collect())
    }

    fn check_multipliers(&self, multipliers: Option<&[f32]>) -> Result<()> {
        match multipliers {
            Some(m) if m.len() != self.len() => Err(Error::shape("row multipliers", self.len(), m.len())),
            _ => Ok(()),
        }
    }

    pub fn retrieve(&self, q: &FeatureVector, fingerprint: &str, k: usize) -> Result<RetrievalResult> {
        self.retrieve_with(q, fingerprint, k, RetrieveOptions::default())
    }

    /// Exact top-`k` rows by (optionally weighted) dot product with `q`.
    pub fn retrieve_with(
        &self,
        q: &FeatureVector,
        fingerprint: &str,
        k: usize,
        options: RetrieveOptions<'_>,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        self.check_query(q, fingerprint)?;
        self.check_multipliers(options.multipliers)?;
        let n = self.len();
        let take = k.min(n);
        let best = match options.shard_rows {
            None => top_k((0..n).map(|i| self.score_row(i, &q.values, options.multipliers)), take),
            Some(rows) => {
                let rows = rows.max(1);
                let partial: Vec<Vec<Scored>> = (0..n.div_ceil(rows))
                    .into_par_iter()
                    .map(|s| {
                        let range = s * rows..((s + 1) * rows).min(n);
                        top_k(range.map(|i| self.score_row(i, &q.values, options.multipliers)), take)
                    })
                    .collect();
                top_k(partial.into_iter().flatten(), take)
            }
        };
        Ok(RetrievalResult {
            query_id: q.example_id,
            fingerprint: fingerprint.to_string(),
            hits: hits_from(best),
            truncated: k > n,
        })
    }
}
