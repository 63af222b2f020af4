//! Named-tensor containers: `HNWT` for weights, `HNLR` for adapters.
//!
//! Both start with a 4-byte magic, a u16 version and a u32 entry count. An
//! entry is a u16 name length, the UTF-8 name, a u8 rank, u32 dims and the
//! f32 payload, all little-endian. `HNLR` puts a provenance byte after the
//! version and follows every entry with the adapter's u16 rank and f32 scaling.

use std::collections::BTreeMap;
use std::path::Path;

use hollownet::lora::{LoraAdapter, LoraAdapterSet, Provenance};
use hollownet::model::{BlockGraph, ParamStore};
use hollownet::numerics::Tensor;
use hollownet::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"HNWT";
pub const ADAPTER_MAGIC: &[u8; 4] = b"HNLR";
pub const VERSION: u16 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            format: self.format,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| self.err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(self.err("bad magic"));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.err("entry name is not UTF-8"))?
            .to_owned();
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| self.err(format!("`{name}` dims overflow")))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("payload too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(dims, data)?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn tensors_to_bytes<'a>(n: usize, entries: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for (name, t) in entries {
        put_tensor(&mut out, name, t);
    }
    out
}

pub fn weights_to_bytes(params: &ParamStore) -> Vec<u8> {
    tensors_to_bytes(params.len(), params.iter())
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        format: "HNWT",
    };
    r.header(WEIGHTS_MAGIC)?;
    let n = r.u32()?;
    let mut map = BTreeMap::new();
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        if map.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate entry `{name}`")));
        }
    }
    r.finish()?;
    Ok(map)
}

pub fn save_weights(path: &Path, params: &ParamStore) -> Result<()> {
    std::fs::write(path, weights_to_bytes(params))?;
    Ok(())
}

/// Any named tensors in the `HNWT` container.
pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    std::fs::write(path, tensors_to_bytes(tensors.len(), tensors.iter()))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    weights_from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it against `graph`.
pub fn load_weights(path: &Path, graph: &BlockGraph) -> Result<ParamStore> {
    let bytes = std::fs::read(path)?;
    ParamStore::from_map(graph, weights_from_bytes(&bytes)?)
        .map_err(|e| Error::Mismatch(format!("{}: {e}", path.display())))
}

pub fn adapters_to_bytes(set: &LoraAdapterSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ADAPTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(set.provenance.code());
    out.extend_from_slice(&(2 * set.len() as u32).to_le_bytes());
    for a in set.adapters.values() {
        for (name, t) in [(a.a_name(), &a.a), (a.b_name(), &a.b)] {
            put_tensor(&mut out, &name, t);
            out.extend_from_slice(&(a.rank as u16).to_le_bytes());
            out.extend_from_slice(&a.scaling.to_le_bytes());
        }
    }
    out
}

pub fn adapters_from_bytes(bytes: &[u8]) -> Result<LoraAdapterSet> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        format: "HNLR",
    };
    r.header(ADAPTER_MAGIC)?;
    let code = r.u8()?;
    let provenance = Provenance::from_code(code).ok_or_else(|| r.err(format!("unknown provenance {code}")))?;
    let n = r.u32()? as usize;
    if n % 2 != 0 {
        return Err(r.err("adapter factors come in pairs"));
    }
    let mut set = LoraAdapterSet::empty(provenance);
    for _ in 0..n / 2 {
        let (an, a) = r.tensor()?;
        let (rank_a, s_a) = (r.u16()?, r.f32()?);
        let (bn, b) = r.tensor()?;
        let (rank_b, s_b) = (r.u16()?, r.f32()?);
        let target = an
            .strip_suffix(".lora_a")
            .filter(|t| bn.strip_suffix(".lora_b") == Some(*t))
            .ok_or_else(|| r.err(format!("unpaired factors `{an}` and `{bn}`")))?
            .to_owned();
        if rank_a != rank_b || s_a.to_bits() != s_b.to_bits() {
            return Err(r.err(format!("`{target}` factors disagree on rank or scaling")));
        }
        let ad = LoraAdapter::new(&target, a, b, s_a)?;
        if ad.rank != rank_a as usize {
            return Err(r.err(format!("`{target}` declares rank {rank_a}, factors have {}", ad.rank)));
        }
        set.adapters.insert(target, ad);
    }
    r.finish()?;
    Ok(set)
}

pub fn save_adapters(path: &Path, set: &LoraAdapterSet) -> Result<()> {
    std::fs::write(path, adapters_to_bytes(set))?;
    Ok(())
}

pub fn load_adapters(path: &Path, graph: &BlockGraph) -> Result<LoraAdapterSet> {
    let set = adapters_from_bytes(&std::fs::read(path)?)?;
    set.check_against(graph)
        .map_err(|e| Error::Mismatch(format!("{}: {e}", path.display())))?;
    Ok(set)
}
