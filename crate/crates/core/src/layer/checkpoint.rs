//! Binary per-shard checkpoint files.
//!
//! Layout (little endian): magic `SMPS`, `u16` version, a fixed header, then
//! the `f32` arrays weights, biases, m_w, v_w, m_b, v_b.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Activation, LayerSpec, NeuronShard};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SMPS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub layer_index: u32,
    pub spec: LayerSpec,
    pub shard_id: u32,
    pub offset: u64,
    pub count: u64,
    pub step: u64,
    pub hash_seed: u64,
    pub hash_generation: u64,
}

const HEADER_LEN: usize = 4 + 2 + 4 + 1 + 8 + 8 + 8 + 4 + 8 * 5;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::checkpoint("truncated header"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn encode_shard(header: &ShardHeader, shard: &NeuronShard<f32>) -> Vec<u8> {
    let cells = shard.weights.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (3 * cells + 3 * shard.local_count));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.layer_index.to_le_bytes());
    out.push(match header.spec.activation {
        Activation::Relu => 0,
        Activation::Softmax => 1,
    });
    out.extend_from_slice(&(header.spec.in_dim as u64).to_le_bytes());
    out.extend_from_slice(&(header.spec.out_dim as u64).to_le_bytes());
    out.extend_from_slice(&header.spec.sparsity.to_le_bytes());
    out.extend_from_slice(&header.shard_id.to_le_bytes());
    for v in [
        header.offset,
        header.count,
        header.step,
        header.hash_seed,
        header.hash_generation,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for arr in [
        &shard.weights,
        &shard.biases,
        &shard.m_w,
        &shard.v_w,
        &shard.m_b,
        &shard.v_b,
    ] {
        for v in arr.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_shard(buf: &[u8]) -> Result<(ShardHeader, NeuronShard<f32>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take::<4>()? != MAGIC {
        return Err(Error::checkpoint("bad magic, not a shard checkpoint"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let layer_index = r.u32()?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Softmax,
        a => return Err(Error::checkpoint(format!("unknown activation tag {a}"))),
    };
    let in_dim = r.u64()? as usize;
    let out_dim = r.u64()? as usize;
    let sparsity = r.f64()?;
    let shard_id = r.u32()?;
    let offset = r.u64()?;
    let count = r.u64()?;
    let step = r.u64()?;
    let hash_seed = r.u64()?;
    let hash_generation = r.u64()?;
    let header = ShardHeader {
        layer_index,
        spec: LayerSpec {
            in_dim,
            out_dim,
            activation,
            sparsity,
        },
        shard_id,
        offset,
        count,
        step,
        hash_seed,
        hash_generation,
    };
    if offset.checked_add(count).is_none_or(|end| end > out_dim as u64) {
        return Err(Error::checkpoint("shard range exceeds layer width"));
    }
    let cells = (count as usize)
        .checked_mul(in_dim)
        .ok_or_else(|| Error::checkpoint("shard size overflows"))?;
    let floats = cells
        .checked_mul(3)
        .and_then(|c| c.checked_add(3 * count as usize))
        .ok_or_else(|| Error::checkpoint("shard size overflows"))?;
    let body = &buf[r.pos..];
    if body.len() != floats * 4 {
        return Err(Error::checkpoint(format!(
            "payload holds {} bytes, expected {}",
            body.len(),
            floats * 4
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")));
    let mut next = |n: usize| -> Vec<f32> { values.by_ref().take(n).collect() };
    let n = count as usize;
    let shard = NeuronShard {
        shard_id: shard_id as usize,
        global_offset: offset as usize,
        local_count: n,
        in_dim,
        weights: next(cells),
        biases: next(n),
        m_w: next(cells),
        v_w: next(cells),
        m_b: next(n),
        v_b: next(n),
        step,
    };
    Ok((header, shard))
}

pub fn write_shard(path: &Path, header: &ShardHeader, shard: &NeuronShard<f32>) -> Result<()> {
    let bytes = encode_shard(header, shard);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<(ShardHeader, NeuronShard<f32>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_shard(&bytes).map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))
}
