use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{read_index, write_index, FeatureIndex, IndexHeader, RowMeta};
use crate::gradfeat::{Featurized, Featurizer};
use crate::tinylm::ExampleRecord;
use crate::{Error, Result};

pub const DEFAULT_SHARD_ROWS: usize = 65536;

fn featurize_rows<F>(header: &IndexHeader, corpus: &[ExampleRecord], offsets: Option<&[(u64, u64)]>, f: &F) -> Result<(Vec<RowMeta>, Vec<f32>)>
where
    F: Fn(&ExampleRecord) -> Result<Featurized> + Sync,
{
    let d = header.dim();
    let out: Vec<Featurized> = corpus.par_iter().map(f).collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(corpus.len() * d);
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, (ex, feat)) in corpus.iter().zip(out).enumerate() {
        if feat.vector.values.len() != d {
            return Err(Error::shape("feature dimension", d, feat.vector.values.len()));
        }
        if !feat.vector.is_finite() {
            return Err(Error::InvalidExample { id: ex.id, reason: "non-finite feature vector".into() });
        }
        data.extend_from_slice(&feat.vector.values);
        let (offset, len) = match offsets {
            Some(o) => (Some(o[i].0), Some(o[i].1)),
            None => (None, None),
        };
        rows.push(RowMeta { id: ex.id, offset, len, mean_p: feat.mean_probability });
    }
    Ok((rows, data))
}

fn check_offsets(corpus: &[ExampleRecord], offsets: Option<&[(u64, u64)]>) -> Result<()> {
    match offsets {
        Some(o) if o.len() != corpus.len() => Err(Error::shape("corpus offsets", corpus.len(), o.len())),
        _ => Ok(()),
    }
}

/// One row per corpus example, in corpus order, from an arbitrary
/// featurization function.
pub fn build_index_with<F>(header: IndexHeader, corpus: &[ExampleRecord], offsets: Option<&[(u64, u64)]>, f: F) -> Result<FeatureIndex>
where
    F: Fn(&ExampleRecord) -> Result<Featurized> + Sync,
{
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_offsets(corpus, offsets)?;
    let (rows, data) = featurize_rows(&header, corpus, offsets, &f)?;
    FeatureIndex::from_rows(header, rows, data)
}

/// Builds the index with a featurizer after checking its artifacts agree
/// with the header layout.
pub fn build_index(
    header: IndexHeader,
    corpus: &[ExampleRecord],
    offsets: Option<&[(u64, u64)]>,
    featurizer: &Featurizer<'_>,
) -> Result<FeatureIndex> {
    check_featurizer(&header, featurizer)?;
    build_index_with(header, corpus, offsets, |ex| featurizer.featurize(ex))
}

fn check_featurizer(header: &IndexHeader, featurizer: &Featurizer<'_>) -> Result<()> {
    featurizer.validate()?;
    if featurizer.projection.block_dims() != header.block_dims {
        return Err(Error::LayoutMismatch(format!(
            "index header blocks {:?} vs projection blocks {:?}",
            header.block_dims,
            featurizer.projection.block_dims()
        )));
    }
    Ok(())
}

/// Restartable build over contiguous shards stored in `dir`.
///
/// Each shard `shard-NNNNN.tsix` is written once; on restart, shards already
/// present are loaded instead of recomputed. A shard left by a different
/// method configuration is an error rather than silently mixed in.
pub fn build_sharded(
    dir: &Path,
    shard_rows: usize,
    header: IndexHeader,
    corpus: &[ExampleRecord],
    offsets: Option<&[(u64, u64)]>,
    featurizer: &Featurizer<'_>,
) -> Result<FeatureIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if shard_rows == 0 {
        return Err(Error::InvalidConfig("index.shard_rows must be at least 1".into()));
    }
    check_offsets(corpus, offsets)?;
    check_featurizer(&header, featurizer)?;
    fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(corpus.len());
    let mut data = Vec::with_capacity(corpus.len() * header.dim());
    for (s, chunk) in corpus.chunks(shard_rows).enumerate() {
        let start = s * shard_rows;
        let path = dir.join(format!("shard-{s:05}.tsix"));
        let shard_offsets = offsets.map(|o| &o[start..start + chunk.len()]);
        let shard = if path.exists() {
            let shard = read_index(&path)?;
            if shard.header.fingerprint != header.fingerprint || shard.header.tag != header.tag {
                return Err(Error::FingerprintMismatch {
                    index: format!("{} (partial shard {})", shard.header.fingerprint, path.display()),
                    query: header.fingerprint.clone(),
                });
            }
            let ids_match = shard.rows.len() == chunk.len() && shard.rows.iter().zip(chunk).all(|(r, e)| r.id == e.id);
            if !ids_match || shard.header.block_dims != header.block_dims {
                return Err(Error::format("index shard", format!("{} does not cover the expected rows", path.display())));
            }
            shard
        } else {
            let (r, d) = featurize_rows(&header, chunk, shard_offsets, &|ex| featurizer.featurize(ex))?;
            let shard = FeatureIndex::from_rows(header.clone(), r, d)?;
            let tmp = dir.join(format!("shard-{s:05}.tsix.tmp"));
            write_index(&tmp, &shard)?;
            fs::rename(super::sidecar_path(&tmp), super::sidecar_path(&path))?;
            fs::rename(&tmp, &path)?;
            shard
        };
        rows.extend(shard.rows);
        data.extend(shard.data);
    }
    FeatureIndex::from_rows(header, rows, data)
}
