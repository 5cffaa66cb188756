//! Checkpoint file: `TLM1`, version, config block, 16-byte artifact tag,
//! parameter count and float32 parameters in declaration order, followed by
//! `OPT1` and the optimizer state. All integers and floats little-endian.

use std::io::{Read, Write};

use super::{ModelConfig, ModelState, OptimizerState, ParamLayout, SecondMoment, TrainHyper};
use crate::io::{LeReader, LeWriter};
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"TLM1";
const OPT_MAGIC: &[u8; 4] = b"OPT1";
const VERSION: u32 = 1;
const KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: OptimizerState,
    /// Identifies the configuration that produced the checkpoint.
    pub tag: [u8; 16],
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let cfg = &ckpt.state.config;
    let mut w = LeWriter::new(out);
    w.bytes(MODEL_MAGIC)?;
    w.u32(VERSION)?;
    for v in [cfg.vocab_size, cfg.layers, cfg.embed_dim, cfg.mlp_hidden, cfg.heads, cfg.seq_len_max] {
        w.u32(v as u32)?;
    }
    w.u64(cfg.seed)?;
    w.bytes(&ckpt.tag)?;
    w.u64(ckpt.state.params.len() as u64)?;
    w.f32s(&ckpt.state.params)?;

    let opt = &ckpt.optimizer;
    let h = &opt.hyper;
    w.bytes(OPT_MAGIC)?;
    w.u64(opt.step)?;
    w.f64(h.learning_rate)?;
    w.u64(h.warmup_steps)?;
    w.u32(h.batch_size as u32)?;
    w.u8(h.factored as u8)?;
    w.f64(h.decay_exponent)?;
    w.f64(h.eps1)?;
    w.f64(h.eps2)?;
    w.f64(h.clip_threshold)?;
    w.u8(h.scale_by_param_rms as u8)?;
    w.f64(h.weight_decay)?;
    w.u32(opt.moments.len() as u32)?;
    for m in &opt.moments {
        match m {
            SecondMoment::Full(v) => {
                w.u8(0)?;
                w.u64(v.len() as u64)?;
                w.f32s(v)?;
            }
            SecondMoment::Factored { row, col } => {
                w.u8(1)?;
                w.u64(row.len() as u64)?;
                w.f32s(row)?;
                w.u64(col.len() as u64)?;
                w.f32s(col)?;
            }
        }
    }
    w.into_inner().flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = LeReader::new(input, KIND);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        layers: dims[1],
        embed_dim: dims[2],
        mlp_hidden: dims[3],
        heads: dims[4],
        seq_len_max: dims[5],
        seed: r.u64()?,
    };
    config.validate().map_err(|e| Error::format(KIND, e.to_string()))?;
    let tag = r.bytes::<16>()?;
    let layout = ParamLayout::new(&config);
    let n = r.len(layout.total())?;
    if n != layout.total() {
        return Err(r.err(format!("{n} parameters, config implies {}", layout.total())));
    }
    let params = r.f32s(n)?;

    r.magic(OPT_MAGIC)?;
    let step = r.u64()?;
    let hyper = TrainHyper {
        learning_rate: r.f64()?,
        warmup_steps: r.u64()?,
        batch_size: r.u32()? as usize,
        factored: r.u8()? != 0,
        decay_exponent: r.f64()?,
        eps1: r.f64()?,
        eps2: r.f64()?,
        clip_threshold: r.f64()?,
        scale_by_param_rms: r.u8()? != 0,
        weight_decay: r.f64()?,
    };
    let count = r.u32()? as usize;
    let limit = layout.total();
    let mut moments = Vec::with_capacity(count.min(layout.tensors().len()));
    for _ in 0..count {
        let m = match r.u8()? {
            0 => {
                let n = r.len(limit)?;
                SecondMoment::Full(r.f32s(n)?)
            }
            1 => {
                let n = r.len(limit)?;
                let row = r.f32s(n)?;
                let n = r.len(limit)?;
                SecondMoment::Factored { row, col: r.f32s(n)? }
            }
            k => return Err(r.err(format!("unknown moment kind {k}"))),
        };
        moments.push(m);
    }
    let optimizer = OptimizerState { step, hyper, moments };
    optimizer.check_layout(&layout).map_err(|e| Error::format(KIND, e.to_string()))?;
    Ok(Checkpoint {
        state: ModelState { config, params },
        optimizer,
        tag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_magic() {
        let cfg = ModelConfig { vocab_size: 10, layers: 1, embed_dim: 4, mlp_hidden: 6, heads: 2, seq_len_max: 8, seed: 3 };
        let state = ModelState::init(&cfg).unwrap();
        let optimizer = OptimizerState::new(&state.layout(), TrainHyper::default());
        let ckpt = Checkpoint { state, optimizer, tag: [7; 16] };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        assert_eq!(&buf[..4], b"TLM1");
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, ckpt);

        buf[0] = b'X';
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format { .. })));
    }
}
