//! Index file: `TSIX1`, u32 version, u32 d, u16 block count, u32 per block
//! dim, u64 n, 64 reserved bytes (8-byte fingerprint digest, 16-byte config
//! tag, zeros), zero padding to a 64-byte boundary, then n rows of d
//! float32. The sidecar `<file>.meta.jsonl` starts with a header record
//! holding the full fingerprint, followed by one record per row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureIndex, IndexHeader, RowMeta};
use crate::io::{LeReader, LeWriter};
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"TSIX1";
const VERSION: u32 = 1;
const KIND: &str = "index";
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarHeader {
    fingerprint: String,
    d: usize,
    n: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.jsonl");
    PathBuf::from(s)
}

fn digest(fingerprint: &str) -> [u8; 8] {
    let h = Sha256::digest(fingerprint.as_bytes());
    let mut out = [0u8; 8];
    out.copy_from_slice(&h[..8]);
    out
}

fn header_len(blocks: usize) -> usize {
    MAGIC.len() + 4 + 4 + 2 + 4 * blocks + 8 + 64
}

pub fn write_index(path: &Path, index: &FeatureIndex) -> Result<()> {
    let h = &index.header;
    let mut w = LeWriter::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(h.dim() as u32)?;
    w.u16(h.block_dims.len() as u16)?;
    for &d in &h.block_dims {
        w.u32(d as u32)?;
    }
    w.u64(index.len() as u64)?;
    let mut reserved = [0u8; 64];
    reserved[..8].copy_from_slice(&digest(&h.fingerprint));
    reserved[8..24].copy_from_slice(&h.tag);
    w.bytes(&reserved)?;
    let pad = (ALIGN - header_len(h.block_dims.len()) % ALIGN) % ALIGN;
    w.bytes(&vec![0u8; pad])?;
    w.f32s(&index.data)?;
    w.into_inner().flush()?;

    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    let head = SidecarHeader { fingerprint: h.fingerprint.clone(), d: h.dim(), n: index.len() };
    serde_json::to_writer(&mut side, &head)?;
    side.write_all(b"\n")?;
    for r in &index.rows {
        serde_json::to_writer(&mut side, r)?;
        side.write_all(b"\n")?;
    }
    side.flush()?;
    Ok(())
}

pub fn read_index(path: &Path) -> Result<FeatureIndex> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            name: path.display().to_string(),
            producer: "build-index".into(),
        },
        _ => e.into(),
    })?;
    let mut r = LeReader::new(BufReader::new(file), KIND);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let d = r.u32()? as usize;
    let blocks = r.u16()? as usize;
    let mut block_dims = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        block_dims.push(r.u32()? as usize);
    }
    if block_dims.iter().sum::<usize>() != d || d == 0 {
        return Err(r.err(format!("block dims {block_dims:?} do not sum to d = {d}")));
    }
    let n = r.u64()? as usize;
    let reserved: [u8; 64] = r.bytes()?;
    let pad = (ALIGN - header_len(blocks) % ALIGN) % ALIGN;
    for _ in 0..pad {
        r.u8()?;
    }
    let data = r.f32s(n.checked_mul(d).ok_or_else(|| r.err("row count overflow"))?)?;
    let mut extra = [0u8; 1];
    if std::io::Read::read(&mut r.into_inner(), &mut extra)? != 0 {
        return Err(Error::format(KIND, "trailing bytes after rows"));
    }

    let side = File::open(sidecar_path(path))?;
    let mut lines = BufReader::new(side).lines();
    let first = lines.next().ok_or_else(|| Error::format("index sidecar", "missing header record"))??;
    let head: SidecarHeader = serde_json::from_str(&first)?;
    if head.d != d || head.n != n {
        return Err(Error::format("index sidecar", format!("header says d={}, n={}; index has d={d}, n={n}", head.d, head.n)));
    }
    if digest(&head.fingerprint) != reserved[..8] {
        return Err(Error::format("index sidecar", "fingerprint does not match the index file"));
    }
    let mut tag = [0u8; 16];
    tag.copy_from_slice(&reserved[8..24]);
    let rows = lines
        .map(|l| Ok(serde_json::from_str::<RowMeta>(&l?)?))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() != n {
        return Err(Error::format("index sidecar", format!("{} row records for {n} rows", rows.len())));
    }
    FeatureIndex::from_rows(IndexHeader { fingerprint: head.fingerprint, block_dims, tag }, rows, data)
}
