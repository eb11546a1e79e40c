//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPKC" | u32 version
//! u32 meta_len | meta bytes (UTF-8)
//! u64 step | u32 epoch
//! table: parameters
//! f32 momentum | f32 lr | table: velocity
//! u32 sections | per section: u32 tag_len, tag, u64 len, bytes
//!
//! table := u32 count | per entry: u32 name_len, name, u32 ndim, u64 dims…, f32 data…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{OptimizerState, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPKC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub step: u64,
    pub epoch: u32,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: OptimizerState,
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn section(&self, tag: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, b)| b.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.string(&self.meta);
        w.u64(self.step);
        w.u32(self.epoch);
        w.table(self.params.iter().map(|(n, t)| (n.as_str(), t)));
        w.f32(self.optimizer.momentum);
        w.f32(self.optimizer.current_lr);
        let names: Vec<String> = (0..self.optimizer.velocity.len())
            .map(|i| format!("v{i}"))
            .collect();
        w.table(names.iter().map(String::as_str).zip(&self.optimizer.velocity));
        w.u32(self.sections.len() as u32);
        for (tag, body) in &self.sections {
            w.string(tag);
            w.u64(body.len() as u64);
            w.bytes(body);
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let meta = r.string()?;
        let step = r.u64()?;
        let epoch = r.u32()?;
        let params = r.table()?;
        let momentum = r.f32()?;
        let current_lr = r.f32()?;
        let velocity = r.table()?.into_iter().map(|(_, t)| t).collect();
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag = r.string()?;
            let len = r.u64()? as usize;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        if !r.is_done() {
            return Err(Error::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(Self {
            meta,
            step,
            epoch,
            params,
            optimizer: OptimizerState {
                momentum,
                current_lr,
                velocity,
            },
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian byte sink shared by the binary formats in this crate.
#[derive(Default)]
pub struct ByteWriter(pub Vec<u8>);

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, v: &[f32]) {
        for &x in v {
            self.f32(x);
        }
    }
    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    pub fn table<'a>(&mut self, entries: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>) {
        self.u32(entries.len() as u32);
        for (name, t) in entries {
            self.string(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            self.f32s(t.data());
        }
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
    pub fn table(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()?;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| self.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let data = self.f32s(len)?;
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}
