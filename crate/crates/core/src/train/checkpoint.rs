//! Versioned little-endian checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "LGCCKPT\0"
//! version      u32       1
//! step         u64
//! epoch        u64
//! phase        u8        1 or 2
//! adam_t       u64
//! config       u64 length + UTF-8 TOML of the run configuration
//! student      f64 array
//! teacher      f64 array
//! adam_m       f64 array
//! adam_v       f64 array
//! norm_mean    f64 array
//! norm_std     f64 array
//! pool         u8 flag; if 1: u64 classes, u64 per_class, u64 dim, f64 array
//! checksum     u64       FNV-1a over every preceding byte
//! ```
//!
//! An `f64 array` is a `u64` element count followed by the raw values.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::data::Normalizer;
use super::RunState;
use crate::error::{Error, Result};
use crate::losses::Phase;
use crate::nn::{Adam, ModelPair};
use crate::prototypes::PrototypePool;

pub const MAGIC: &[u8; 8] = b"LGCCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub normalizer: Normalizer,
    pub state: RunState,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint(format!("length {n} at byte {} exceeds the file", self.pos)));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u64(s.step);
        w.u64(s.epoch as u64);
        w.u8(match s.phase {
            Phase::L1 => 1,
            Phase::L2 => 2,
        });
        w.u64(s.optimizer.t);
        w.bytes(self.config.to_toml_string()?.as_bytes());
        w.f64s(&s.models.student);
        w.f64s(&s.models.teacher);
        w.f64s(&s.optimizer.m);
        w.f64s(&s.optimizer.v);
        w.f64s(&self.normalizer.mean);
        w.f64s(&self.normalizer.std);
        match &s.pool {
            Some(pool) => {
                w.u8(1);
                w.u64(pool.n_classes() as u64);
                w.u64(pool.per_class() as u64);
                w.u64(pool.dim() as u64);
                w.f64s(pool.as_slice());
            }
            None => w.u8(0),
        }
        let sum = fnv1a(&w.0);
        w.u64(sum);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 12 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let body = &buf[..buf.len() - 8];
        let stored = u64::from_le_bytes(buf[buf.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let step = r.u64()?;
        let epoch = r.u64()? as usize;
        let phase = match r.u8()? {
            1 => Phase::L1,
            2 => Phase::L2,
            p => return Err(Error::Checkpoint(format!("bad phase {p}"))),
        };
        let adam_t = r.u64()?;
        let text = std::str::from_utf8(r.bytes()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = RunConfig::from_toml_str(text)?;
        let student = r.f64s()?;
        let teacher = r.f64s()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let mean = r.f64s()?;
        let std = r.f64s()?;
        let pool = match r.u8()? {
            0 => None,
            1 => {
                let (c, k, d) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
                let data = r.f64s()?;
                Some(PrototypePool::from_parts(c, k, d, config.prototypes.momentum, data, true)?)
            }
            f => return Err(Error::Checkpoint(format!("bad pool flag {f}"))),
        };
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        if teacher.len() != student.len() || m.len() != student.len() || v.len() != student.len() {
            return Err(Error::Checkpoint("parameter arrays differ in length".into()));
        }
        let mut optimizer = Adam::new(student.len(), config.optim.lr);
        optimizer.m = m;
        optimizer.v = v;
        optimizer.t = adam_t;
        let state = RunState { step, epoch, phase, models: ModelPair { student, teacher }, optimizer, pool };
        Ok(Self { config, normalizer: Normalizer { mean, std }, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
