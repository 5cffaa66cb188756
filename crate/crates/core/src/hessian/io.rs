//! Hessian file: `HESS1`, version, block count and per-block dims, then for
//! each block the example count, float32 `R` in row-major order, a flag and
//! optionally float32 `R^-1/2`; finally the provenance record.

use std::io::{Read, Write};

use ndarray::Array2;

use super::{HessianBlock, HessianBlocks, Provenance, Source};
use crate::io::{LeReader, LeWriter};
use crate::Result;

const MAGIC: &[u8; 5] = b"HESS1";
const VERSION: u32 = 1;
const KIND: &str = "hessian";
const MAX_BLOCK_DIM: usize = 1 << 16;

fn to_f32(m: &Array2<f64>) -> Vec<f32> {
    m.iter().map(|&v| v as f32).collect()
}

pub fn write_hessian<W: Write>(out: W, h: &HessianBlocks) -> Result<()> {
    let mut w = LeWriter::new(out);
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u16(h.blocks.len() as u16)?;
    for b in &h.blocks {
        w.u32(b.r.nrows() as u32)?;
    }
    for b in &h.blocks {
        w.u64(b.count)?;
        w.f32s(&to_f32(&b.r))?;
        match &b.inv_sqrt {
            Some(inv) => {
                w.u8(1)?;
                w.f32s(&to_f32(inv))?;
            }
            None => w.u8(0)?,
        }
    }
    let p = &h.provenance;
    let (kind, lambda) = match p.source {
        Source::Train => (0u8, 0.0),
        Source::Eval => (1, 1.0),
        Source::Mixed { lambda } => (2, lambda),
    };
    w.u8(kind)?;
    w.f64(lambda)?;
    w.u32(p.crossover_rank)?;
    w.u64(p.train_count)?;
    w.u64(p.eval_count)?;
    w.u64(p.projection_seed)?;
    w.bytes(&p.tag)?;
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_hessian<R: Read>(input: R) -> Result<HessianBlocks> {
    let mut r = LeReader::new(input, KIND);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let n_blocks = r.u16()? as usize;
    let mut dims = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let d = r.u32()? as usize;
        if d == 0 || d > MAX_BLOCK_DIM {
            return Err(r.err(format!("block dimension {d} out of range")));
        }
        dims.push(d);
    }
    let mut blocks = Vec::with_capacity(n_blocks);
    for &d in &dims {
        let count = r.u64()?;
        let read_matrix = |r: &mut LeReader<R>| -> Result<Array2<f64>> {
            let vals = r.f32s(d * d)?;
            Ok(Array2::from_shape_fn((d, d), |(i, j)| vals[i * d + j] as f64))
        };
        let rm = read_matrix(&mut r)?;
        let inv_sqrt = match r.u8()? {
            0 => None,
            1 => Some(read_matrix(&mut r)?),
            f => return Err(r.err(format!("bad inverse flag {f}"))),
        };
        blocks.push(HessianBlock { r: rm, count, inv_sqrt });
    }
    let kind = r.u8()?;
    let lambda = r.f64()?;
    let source = match kind {
        0 => Source::Train,
        1 => Source::Eval,
        2 => Source::Mixed { lambda },
        k => return Err(r.err(format!("bad source kind {k}"))),
    };
    let crossover_rank = r.u32()?;
    let train_count = r.u64()?;
    let eval_count = r.u64()?;
    let projection_seed = r.u64()?;
    let tag = r.bytes::<16>()?;
    Ok(HessianBlocks {
        blocks,
        provenance: Provenance { source, crossover_rank, train_count, eval_count, projection_seed, tag },
    })
}
