//! Line-delimited JSON files for the corpus and the facts.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{CorpusPassage, FactRecord, Vocab};
use crate::{Error, Result};

fn write_lines<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<Vec<(u64, u64)>> {
    let mut offsets = Vec::with_capacity(items.len());
    let mut at = 0u64;
    for item in items {
        let mut line = serde_json::to_vec(item)?;
        line.push(b'\n');
        out.write_all(&line)?;
        offsets.push((at, line.len() as u64));
        at += line.len() as u64;
    }
    out.flush()?;
    Ok(offsets)
}

fn read_lines<R: BufRead, T: DeserializeOwned>(input: R, kind: &'static str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(kind, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Writes one passage per line and returns each line's `(offset, length)`.
pub fn write_corpus<W: Write>(out: W, passages: &[CorpusPassage]) -> Result<Vec<(u64, u64)>> {
    write_lines(out, passages)
}

/// Reads passages and tokenizes them with `vocab`.
pub fn read_corpus<R: BufRead>(input: R, vocab: &Vocab) -> Result<Vec<CorpusPassage>> {
    let mut passages: Vec<CorpusPassage> = read_lines(input, "corpus")?;
    for p in &mut passages {
        p.token_ids = vocab.encode(&p.text);
    }
    Ok(passages)
}

pub fn write_facts<W: Write>(out: W, facts: &[FactRecord]) -> Result<Vec<(u64, u64)>> {
    write_lines(out, facts)
}

pub fn read_facts<R: BufRead>(input: R) -> Result<Vec<FactRecord>> {
    let facts: Vec<FactRecord> = read_lines(input, "facts")?;
    for f in &facts {
        for e in [&f.subject, &f.object] {
            if e.aliases.is_empty() || e.aliases.iter().any(|a| a.chars().count() < 3) {
                return Err(Error::format("facts", format!("fact {} has an empty or short alias list", f.id)));
            }
        }
    }
    Ok(facts)
}
