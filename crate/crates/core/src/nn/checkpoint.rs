//! Binary checkpoint formats, little-endian throughout.
//!
//! Network record:
//!
//! | bytes | content                                       |
//! |-------|-----------------------------------------------|
//! | 4     | magic `GTNN`                                  |
//! | 4     | `u32` format version (1)                      |
//! | 4     | `u32` header length `h`                       |
//! | h     | UTF-8 JSON header (architecture, scalers, flags) |
//! | 8·n   | parameters, `f64`, layer by layer, each weight matrix row-major `out × in` then its bias |
//! | 16·n  | optional AdamW first and second moments (`f64`), same layout |
//!
//! Container (several named records in one file):
//! magic `GTCT`, `u32` version, `u32` entry count, then per entry a `u32`
//! name length, the UTF-8 name, a `u64` payload length and the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use super::mlp::{Mlp, MlpArch};
use super::scaler::Scaler;
use crate::error::{Error, Result};

const NET_MAGIC: &[u8; 4] = b"GTNN";
const CONTAINER_MAGIC: &[u8; 4] = b"GTCT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetCheckpoint {
    pub model: Mlp,
    pub input_scaler: Option<Scaler>,
    pub output_scaler: Option<Scaler>,
    pub optimizer: Option<AdamW>,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    arch: MlpArch,
    n_params: usize,
    input_scaler: Option<Scaler>,
    output_scaler: Option<Scaler>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    t: u64,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Checkpoint(format!(
                "bad magic, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    out.reserve(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl NetCheckpoint {
    pub fn new(model: Mlp) -> Self {
        NetCheckpoint {
            model,
            input_scaler: None,
            output_scaler: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = NetHeader {
            arch: self.model.arch().clone(),
            n_params: self.model.n_params(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                t: o.t,
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        put_f64s(&mut out, self.model.params());
        if let Some(o) = &self.optimizer {
            put_f64s(&mut out, &o.m);
            put_f64s(&mut out, &o.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.magic(NET_MAGIC)?;
        let hlen = r.u32()? as usize;
        let header: NetHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let params = r.f64s(header.n_params)?;
        let model = Mlp::from_params(header.arch, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let optimizer = match header.optimizer {
            Some(o) => Some(AdamW {
                config: o.config,
                m: r.f64s(header.n_params)?,
                v: r.f64s(header.n_params)?,
                t: o.t,
            }),
            None => None,
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after network record".into()));
        }
        Ok(NetCheckpoint {
            model,
            input_scaler: header.input_scaler,
            output_scaler: header.output_scaler,
            optimizer,
        })
    }
}

/// Named byte records stored in one file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Vec<u8>>,
}

impl Container {
    pub fn insert(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.insert(name.to_string(), bytes);
    }

    pub fn get(&self, name: &str) -> Result<&[u8]> {
        self.entries
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, bytes) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        r.magic(CONTAINER_MAGIC)?;
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let len = r.u64()? as usize;
            entries.insert(name, r.take(len)?.to_vec());
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
