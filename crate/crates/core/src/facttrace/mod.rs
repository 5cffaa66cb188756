//! Synthetic fact-tracing benchmark and its evaluation metrics.
//!
//! A benchmark is a set of subject-relation-object facts together with a
//! corpus whose passages carry ground-truth construction labels. Queries are
//! the facts rendered as prompts ending in a colon with the object as target.

mod generate;
mod io;
mod metrics;
mod report;
mod vocab;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::text;
use crate::tinylm::{ExampleRecord, BOS, EOS};
use crate::ExampleId;

pub use generate::{bucket_counts, generate_benchmark, BenchmarkSpec, BucketSpec, RELATIONS};
pub use io::{read_corpus, read_facts, write_corpus, write_facts};
pub use metrics::{
    mrr, recall_at_k, reciprocal_rank, split_by_correctness, tail_patch_eval, TailPatchQuery, TailPatchReport,
};
pub use report::{BreakdownRow, EvalReport, MethodReport};
pub use vocab::{pieces, Vocab};

/// Query example ids start here so they never collide with passage ids.
pub const QUERY_ID_BASE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Person,
    City,
    Country,
    Organization,
    Language,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: u32,
    pub kind: EntityKind,
    /// Surface forms; the first is the canonical name.
    pub aliases: Vec<String>,
}

impl Entity {
    pub fn name(&self) -> &str {
        &self.aliases[0]
    }

    fn alias_words(&self) -> Vec<Vec<String>> {
        self.aliases.iter().map(|a| text::words(a)).collect()
    }

    /// Whether any alias occurs in `words` as a whole-word phrase.
    pub fn mentioned_in(&self, words: &[String]) -> bool {
        self.alias_words().iter().any(|a| text::contains_phrase(words, a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub id: u64,
    pub subject: Entity,
    pub relation: String,
    pub object: Entity,
    pub template: String,
    pub prompt: String,
    pub target: String,
    pub bucket: String,
    /// Passages mentioning both entities.
    pub frequency: usize,
}

impl FactRecord {
    pub fn query_id(&self) -> ExampleId {
        ExampleId(QUERY_ID_BASE + self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PassageLabel {
    Entails { facts: Vec<u64> },
    BothEntities { fact: u64 },
    OneEntity { entity: u32 },
    Distractor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusPassage {
    pub id: ExampleId,
    pub text: String,
    pub label: PassageLabel,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
}

impl CorpusPassage {
    pub fn entails(&self, fact: u64) -> bool {
        matches!(&self.label, PassageLabel::Entails { facts } if facts.contains(&fact))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub facts: Vec<FactRecord>,
    pub passages: Vec<CorpusPassage>,
    pub vocab: Vocab,
}

impl Benchmark {
    /// Training examples: `BOS passage EOS`, every token after BOS scored.
    pub fn corpus_examples(&self) -> Vec<ExampleRecord> {
        self.passages.iter().map(|p| passage_example(p.id, &p.token_ids)).collect()
    }

    /// One completion example per fact.
    pub fn query_examples(&self) -> Vec<ExampleRecord> {
        self.facts.iter().map(|f| self.query_example(f)).collect()
    }

    pub fn query_example(&self, fact: &FactRecord) -> ExampleRecord {
        let (prompt, target) = self.encode_query(&fact.prompt, &fact.target);
        ExampleRecord::completion(fact.query_id(), &prompt, &target)
    }

    /// `(BOS prompt, target)` token ids.
    pub fn encode_query(&self, prompt: &str, target: &str) -> (Vec<u32>, Vec<u32>) {
        let mut p = vec![BOS];
        p.extend(self.vocab.encode(prompt));
        (p, self.vocab.encode(target))
    }

    /// Ids of the passages that entail each fact, in fact order.
    pub fn truth_sets(&self) -> Vec<HashSet<ExampleId>> {
        let mut sets = vec![HashSet::new(); self.facts.len()];
        let pos: std::collections::HashMap<u64, usize> = self.facts.iter().enumerate().map(|(i, f)| (f.id, i)).collect();
        for p in &self.passages {
            if let PassageLabel::Entails { facts } = &p.label {
                for f in facts {
                    if let Some(&i) = pos.get(f) {
                        sets[i].insert(p.id);
                    }
                }
            }
        }
        sets
    }

    pub fn passage(&self, id: ExampleId) -> Option<&CorpusPassage> {
        // Generated ids are dense and in order.
        match self.passages.get(id.0 as usize) {
            Some(p) if p.id == id => Some(p),
            _ => self.passages.iter().find(|p| p.id == id),
        }
    }

    /// Fact whose prompt matches `prompt` after casefolding.
    pub fn fact_for_prompt(&self, prompt: &str) -> Option<&FactRecord> {
        let w = text::words(prompt);
        self.facts.iter().find(|f| text::words(&f.prompt) == w)
    }
}

pub fn passage_example(id: ExampleId, tokens: &[u32]) -> ExampleRecord {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    ids.extend_from_slice(tokens);
    ids.push(EOS);
    ExampleRecord::passage(id, ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Entailing,
    BothEntities,
    OneEntity,
    PartialMatch,
    Neither,
}

impl Category {
    pub const ALL: [Category; 5] =
        [Category::Entailing, Category::BothEntities, Category::OneEntity, Category::PartialMatch, Category::Neither];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Entailing => "entailing",
            Category::BothEntities => "both_entities",
            Category::OneEntity => "one_entity",
            Category::PartialMatch => "partial_match",
            Category::Neither => "neither",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Category of a proponent relative to a fact. Entailment comes from the
/// construction label, the rest from casefolded alias matching.
pub fn categorize_proponent(passage: &CorpusPassage, fact: &FactRecord) -> Category {
    if passage.entails(fact.id) {
        return Category::Entailing;
    }
    categorize_text(&passage.text, &fact.subject, &fact.object)
}

/// Non-entailment categories for arbitrary text and entity pair.
pub fn categorize_text(passage: &str, subject: &Entity, object: &Entity) -> Category {
    let words = text::words(passage);
    match (subject.mentioned_in(&words), object.mentioned_in(&words)) {
        (true, true) => Category::BothEntities,
        (true, false) | (false, true) => Category::OneEntity,
        (false, false) => {
            let present: HashSet<&str> = words.iter().map(|w| w.as_str()).collect();
            let partial = [subject, object]
                .iter()
                .flat_map(|e| e.aliases.iter())
                .flat_map(|a| text::content_words(a))
                .any(|w| present.contains(w.as_str()));
            if partial {
                Category::PartialMatch
            } else {
                Category::Neither
            }
        }
    }
}

/// Number of passages mentioning at least one alias of each entity.
pub fn fact_frequency<'a>(corpus: impl IntoIterator<Item = &'a str>, fact: &FactRecord) -> usize {
    let (s, o) = (fact.subject.alias_words(), fact.object.alias_words());
    corpus
        .into_iter()
        .filter(|t| {
            let w = text::words(t);
            s.iter().any(|a| text::contains_phrase(&w, a)) && o.iter().any(|a| text::contains_phrase(&w, a))
        })
        .count()
}

/// Whether a prediction names the entity: content words of the prediction
/// equal those of some alias.
pub fn prediction_matches(prediction: &str, entity: &Entity) -> bool {
    let p = text::content_words(prediction);
    !p.is_empty() && entity.aliases.iter().any(|a| text::content_words(a) == p)
}

#[cfg(test)]
mod tests;
