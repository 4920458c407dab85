//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AGCNCKPT\n"                      9-byte magic
//! version: u32                       currently 1
//! flags: u32                         bit 0 = optimizer state present
//! count: u32                         number of entries
//! per entry:
//!   name_len: u32, name: [u8; name_len] (UTF-8)
//!   kind: u8                         0 = parameter, 1 = buffer
//!   rank: u32, dims: [u32; rank]
//!   values: [f32; prod(dims)]
//!   if flags bit 0 and kind == 0:
//!     step: u64, first_moment: [f32; n], second_moment: [f32; n]
//! ```
//!
//! Parameters are written before buffers, each group in name order.

use std::fs;
use std::path::Path;

use super::store::{Parameter, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"AGCNCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_OPTIMIZER: u32 = 1;
const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn put_header(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data());
}

pub fn encode_checkpoint(store: &ParameterStore, include_optimizer: bool) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, if include_optimizer { FLAG_OPTIMIZER } else { 0 });
    let count = store.parameters().count() + store.buffers().count();
    put_u32(&mut out, count as u32);
    for (name, p) in store.parameters() {
        put_header(&mut out, name, KIND_PARAM, &p.value);
        if include_optimizer {
            out.extend_from_slice(&p.step.to_le_bytes());
            put_f32s(&mut out, &p.first_moment);
            put_f32s(&mut out, &p.second_moment);
        }
    }
    for (name, b) in store.buffers() {
        put_header(&mut out, name, KIND_BUFFER, b);
    }
    out
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path, include_optimizer: bool) -> Result<()> {
    fs::write(path, encode_checkpoint(store, include_optimizer)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                format!("byte {}", self.pos),
                format!("truncated checkpoint while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.pos;
        let raw = self.take(n * 4, what)?;
        let vals: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::parse(format!("byte {}", at + 4 * i), format!("non-finite value in {what}")));
        }
        Ok(vals)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::parse("byte 0", "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse("byte 9", format!("unsupported checkpoint version {version}")));
    }
    let flags = r.u32("flags")?;
    let count = r.u32("entry count")?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(format!("byte {at}"), "entry name is not UTF-8"))?
            .to_string();
        let kind = r.take(1, "entry kind")?[0];
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape, r.f32s(n, &name)?)?;
        let dup = |e: Error| Error::parse(format!("byte {at}"), e.to_string());
        match kind {
            KIND_PARAM => {
                let mut p = Parameter {
                    value,
                    grad: vec![0.0; n],
                    first_moment: vec![0.0; n],
                    second_moment: vec![0.0; n],
                    step: 0,
                };
                if flags & FLAG_OPTIMIZER != 0 {
                    p.step = u64::from_le_bytes(r.take(8, "step")?.try_into().unwrap());
                    p.first_moment = r.f32s(n, "first moment")?;
                    p.second_moment = r.f32s(n, "second moment")?;
                }
                store.insert_parameter(&name, p).map_err(dup)?;
            }
            KIND_BUFFER => store.insert_buffer(&name, value).map_err(dup)?,
            other => {
                return Err(Error::parse(format!("byte {at}"), format!("unknown entry kind {other}")));
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(format!("byte {}", r.pos), "trailing bytes after last entry"));
    }
    Ok(store)
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::AdamConfig;

    fn sample_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.init_uniform("layer.weight", vec![3, 2], 5).unwrap();
        s.init_constant("layer.bn.gamma", vec![2], 1.0).unwrap();
        s.insert_buffer("layer.bn.running_mean", Tensor::new(vec![2], vec![0.25, -0.5]).unwrap())
            .unwrap();
        s.accumulate_grad("layer.weight", &[0.1, 0.2, 0.3, -0.1, -0.2, -0.3]).unwrap();
        s.adam_update(&AdamConfig::default());
        s
    }

    fn f32_rounded(s: &ParameterStore) -> Vec<(String, Vec<f64>)> {
        s.parameters()
            .map(|(n, p)| (n.to_string(), p.value.data().iter().map(|v| *v as f32 as f64).collect()))
            .collect()
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = encode_checkpoint(&sample_store(), false);
        assert_eq!(&bytes[..9], b"AGCNCKPT\n");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 3);
    }

    #[test]
    fn round_trip_with_and_without_optimizer_state() {
        let s = sample_store();
        let plain = decode_checkpoint(&encode_checkpoint(&s, false)).unwrap();
        assert_eq!(f32_rounded(&plain), f32_rounded(&s));
        assert_eq!(plain.parameter("layer.weight").unwrap().step, 0);
        assert_eq!(plain.buffer("layer.bn.running_mean").unwrap().data(), &[0.25, -0.5]);

        let full = decode_checkpoint(&encode_checkpoint(&s, true)).unwrap();
        let p = full.parameter("layer.weight").unwrap();
        assert_eq!(p.step, 1);
        let orig = s.parameter("layer.weight").unwrap();
        for (a, b) in p.second_moment.iter().zip(&orig.second_moment) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&sample_store(), false);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
