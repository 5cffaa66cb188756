//! Word-level tokenizer for the synthetic corpus: lowercase alphanumeric
//! runs and single punctuation characters, each mapped to one id.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tinylm::{RESERVED_TOKENS, UNK};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocab::new(words)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

/// Splits text into lowercase words and punctuation marks.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocab {
    /// Ids are assigned in the given order after the reserved tokens.
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || ids.insert(w.clone(), (i + RESERVED_TOKENS) as u32).is_some() {
                return Err(Error::InvalidConfig(format!("vocabulary entry `{w}` is empty or repeated")));
            }
        }
        Ok(Vocab { words, ids })
    }

    /// Vocabulary of every piece in `texts`, sorted.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(pieces).collect();
        words.sort();
        words.dedup();
        Vocab::new(words).expect("deduplicated")
    }

    /// Total ids including the reserved ones.
    pub fn size(&self) -> usize {
        self.words.len() + RESERVED_TOKENS
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pieces(text).iter().map(|p| self.id(p).unwrap_or(UNK)).collect()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        (id as usize).checked_sub(RESERVED_TOKENS).and_then(|i| self.words.get(i)).map(|s| s.as_str())
    }

    /// Space-joined pieces with punctuation attached to the previous word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let p = self.piece(id).unwrap_or("<unk>");
            let punct = p.chars().all(|c| !c.is_alphanumeric()) && p != "<unk>";
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(p);
        }
        out
    }
}
