//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"S2ACKPT1"
//! u32 entry count
//! per entry, sorted by name:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, u64 per dimension
//!     u64 offset into the payload, in values
//! payload: f64 values of all entries in manifest order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Parameters, Tensor};

pub const MAGIC: &[u8; 8] = b"S2ACKPT1";

/// Named tensors in deterministic (name) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn from_params<M: Parameters<T> + ?Sized>(model: &M, prefix: &str) -> Self {
        let mut ck = Self::new();
        ck.add_params(model, prefix);
        ck
    }

    pub fn add_params<M: Parameters<T> + ?Sized>(&mut self, model: &M, prefix: &str) {
        model.visit(prefix, &mut |name, t| {
            let mut t = t.clone();
            t.zero_grad();
            self.tensors.insert(name.to_string(), t);
        });
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Store a scalar under `name`.
    pub fn set_scalar(&mut self, name: &str, v: f64) {
        self.insert(name, Tensor::full(&[1], T::lit(v)));
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|t| t.data().first()).map(|v| v.as_f64())
    }

    /// Copy stored values into `model`. Every parameter must be present with
    /// an identical shape.
    pub fn load_into<M: Parameters<T> + ?Sized>(&self, model: &mut M, prefix: &str) -> Result<()> {
        let mut err = None;
        model.visit_mut(prefix, &mut |name, t| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(invalid!("checkpoint has no tensor `{name}`")),
                Some(s) if s.shape() != t.shape() => {
                    err = Some(invalid!("checkpoint tensor `{name}` has shape {:?}, model expects {:?}", s.shape(), t.shape()))
                }
                Some(s) => t.data_mut().copy_from_slice(s.data()),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::format("checkpoint", reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = r.u32().ok_or_else(|| bad("truncated entry count"))?;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let len = r.u32().ok_or_else(|| bad("truncated manifest"))? as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let rank = r.u32().ok_or_else(|| bad("truncated manifest"))? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("truncated shape"))?;
            let offset = r.u64().ok_or_else(|| bad("truncated offset"))? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let slice = values
                .get(offset..offset.checked_add(n).ok_or_else(|| bad("offset overflow"))?)
                .ok_or_else(|| bad(&format!("tensor `{name}` extends past payload")))?;
            let t = Tensor::new(shape, slice.iter().map(|&v| T::lit(v)).collect())?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(&format!("duplicate tensor `{name}`")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}
