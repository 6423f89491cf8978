//! HRFM checkpoint files: configuration, parameters, momentum buffers and
//! training progress, all little endian.
//!
//! ```text
//! b"HRFM" version:u32
//! config:   len:u32 utf8[len]              (flat key = value text)
//! params:   count:u32 { name_len:u32 name rank:u32 dims:u32[rank] f32[numel] }
//! momentum: count:u32 { rank:u32 dims:u32[rank] f32[numel] }   (param order)
//! progress: epochs_done:u64 steps:u64 best_epoch:u64 best_val:f64
//! ```

use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"HRFM";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Progress {
    /// Completed epochs; training resumes at this epoch index.
    pub epochs_done: usize,
    pub steps: usize,
    pub best_epoch: usize,
    /// Best validation mean DSC so far (`-1` before any validation).
    pub best_val: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore<f32>,
    pub momentum: Vec<Tensor<f32>>,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.bytes(self.config.render().as_bytes());
        w.u32(self.params.len() as u32);
        for p in self.params.iter() {
            w.bytes(p.name.as_bytes());
            w.tensor(&p.value);
        }
        w.u32(self.momentum.len() as u32);
        for m in &self.momentum {
            w.tensor(m);
        }
        let pr = &self.progress;
        for x in [pr.epochs_done, pr.steps, pr.best_epoch] {
            w.0.extend_from_slice(&(x as u64).to_le_bytes());
        }
        w.0.extend_from_slice(&pr.best_val.to_le_bytes());
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("not an HRFM checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = Config::parse(&text)?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let value = r.tensor()?;
            params.insert(name, value)?;
        }
        let momentum = (0..r.u32()?).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let progress = Progress {
            epochs_done: r.u64()? as usize,
            steps: r.u64()? as usize,
            best_epoch: r.u64()? as usize,
            best_val: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !momentum.is_empty() && momentum.len() != params.len() {
            return Err(Error::Format(format!(
                "{} momentum buffers for {} parameters",
                momentum.len(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            params,
            momentum,
            progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Checks that names and shapes match a freshly built store.
    pub fn check_compatible(&self, fresh: &ParamStore<f32>) -> Result<()> {
        if fresh.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Format(format!(
                    "parameter mismatch: model `{}` {:?} vs checkpoint `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }

    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for x in t.data() {
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(self.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}
