//! Versioned binary checkpoints: resolved config text, seed, named f64
//! tensors with their trainability flag, and Adam moments.
//!
//! Layout (little-endian): `GCVC`, u16 version, u32 + bytes config text,
//! u64 seed, u32 tensor count, tensors, u64 Adam step, u32 moment count,
//! moments. A tensor is u16 + bytes name, u8 trainable, u8 rank, u32 dims,
//! f64 values. A moment is u16 + bytes name, then two tensors (m, v).

use std::collections::BTreeMap;
use std::path::Path;

use crate::autograd::Tensor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::train::AdamState;

const MAGIC: &[u8; 4] = b"GCVC";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub model: Model,
    pub adam: AdamState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn name(&mut self, s: &str) {
        self.bytes(&(s.len() as u16).to_le_bytes());
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.0.push(t.rank() as u8);
        for &d in t.shape() {
            self.bytes(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(
            Error::Truncated {
                expected: self.pos + n,
                actual: self.buf.len(),
            },
        )?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, seed: u64, model: Model) -> Self {
        Self {
            config,
            seed,
            model,
            adam: AdamState::default(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.bytes(MAGIC);
        w.bytes(&VERSION.to_le_bytes());
        let mut cfg = self.config.clone();
        cfg.model = self.model.config.clone();
        let text = cfg.to_text();
        w.bytes(&(text.len() as u32).to_le_bytes());
        w.bytes(text.as_bytes());
        w.bytes(&self.seed.to_le_bytes());
        let p = &self.model.params;
        w.bytes(&(p.len() as u32).to_le_bytes());
        for (name, t) in p.iter() {
            w.name(name);
            w.0.push(u8::from(p.is_trainable(name)));
            w.tensor(t);
        }
        w.bytes(&self.adam.step.to_le_bytes());
        w.bytes(&(self.adam.moments.len() as u32).to_le_bytes());
        for (name, (m, v)) in &self.adam.moments {
            w.name(name);
            w.tensor(m);
            w.tensor(v);
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let seed = r.u64()?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut trainable = BTreeMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let flag = r.u8()? != 0;
            let t = r.tensor()?;
            if !t.is_finite() {
                return Err(Error::Format(format!("tensor {name} holds non-finite values")));
            }
            trainable.insert(name.clone(), flag);
            params.insert(name, t);
        }
        params.set_trainable(|n| trainable.get(n).copied().unwrap_or(true));
        let step = r.u64()?;
        let count = r.u32()?;
        let mut moments = BTreeMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let m = r.tensor()?;
            let v = r.tensor()?;
            moments.insert(name, (m, v));
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                buf.len() - r.pos
            )));
        }
        let model = Model {
            config: config.model.clone(),
            params,
        };
        Ok(Self {
            config,
            seed,
            model,
            adam: AdamState { step, moments },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
