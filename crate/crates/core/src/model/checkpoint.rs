//! Binary checkpoint format. All integers and floats are little-endian.
//!
//! ```text
//! magic        6 bytes  "MTNET1"
//! config       u32 in_channels, u32 base_width, u32 depth, u32 num_classes,
//!              u32 seg_channels, u32 input_size, u32 norm_groups, f64 dropout_p
//! run meta     u32 epoch, u64 seed, f64 lambda
//! count        u32 number of parameter tensors
//! per tensor   u32 name length, UTF-8 name, u32 rank, u32 × rank dims,
//!              f64 × product(dims) values
//! ```
//!
//! Tensors appear in [`MultiTaskNet::param_groups`] order. Trailing bytes are
//! rejected.

use std::path::Path;

use super::{MultiTaskNet, NetConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MTNET1";
const MAX_RANK: usize = 8;

/// Training context stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckpointMeta {
    pub epoch: u32,
    pub seed: u64,
    pub lambda: f64,
}

/// Decoded checkpoint contents, not yet bound to a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn into_net(self) -> Result<MultiTaskNet> {
        MultiTaskNet::from_named(self.config, self.params)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses checkpoint bytes. Never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not an MTNET1 checkpoint".into()));
    }
    let config = NetConfig {
        in_channels: r.u32("in_channels")? as usize,
        base_width: r.u32("base_width")? as usize,
        depth: r.u32("depth")? as usize,
        num_classes: r.u32("num_classes")? as usize,
        seg_channels: r.u32("seg_channels")? as usize,
        input_size: r.u32("input_size")? as usize,
        norm_groups: r.u32("norm_groups")? as usize,
        dropout_p: r.f64("dropout_p")?,
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;
    let meta = CheckpointMeta { epoch: r.u32("epoch")?, seed: r.u64("seed")?, lambda: r.f64("lambda")? };
    let count = r.u32("tensor count")? as usize;
    let mut params = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u32("dimension")? as usize;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n > 0 && n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape exceeds remaining data")))?;
            shape.push(d);
        }
        let raw = r.take(numel * 8, "tensor data")?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push((name, shape, data));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Checkpoint { config, meta, params })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl MultiTaskNet {
    pub fn encode_checkpoint(&self, meta: CheckpointMeta) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [c.in_channels, c.base_width, c.depth, c.num_classes, c.seg_channels, c.input_size, c.norm_groups] {
            put_u32(&mut out, v);
        }
        out.extend_from_slice(&c.dropout_p.to_le_bytes());
        put_u32(&mut out, meta.epoch as usize);
        out.extend_from_slice(&meta.seed.to_le_bytes());
        out.extend_from_slice(&meta.lambda.to_le_bytes());
        put_u32(&mut out, self.params.len());
        for (name, t) in self.param_groups() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path, meta: CheckpointMeta) -> Result<()> {
        std::fs::write(path, self.encode_checkpoint(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(MultiTaskNet, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = decode_checkpoint(&bytes)?;
        let meta = ck.meta;
        Ok((ck.into_net()?, meta))
    }
}
