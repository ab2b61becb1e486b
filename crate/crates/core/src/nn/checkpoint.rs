//! `CKP1` checkpoints.
//!
//! ```text
//! "CKP1", u32 tensor_count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 data
//! ```
//!
//! Little-endian. String metadata is stored as rank-0 entries named `@key=value` (value 0).
//! Optimizer moments live under `<param>.m` / `<param>.v` with a rank-0 `step` entry.

use std::path::Path;

use super::optim::{AdamW, AdamWConfig};
use super::tensor::Tensor;
use super::ParamSet;
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), t));
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.entries.retain(|(n, _)| !n.starts_with(&format!("@{key}=")));
        self.push(format!("@{key}={value}"), Tensor::scalar(0.0));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        let prefix = format!("@{key}=");
        self.entries.iter().find_map(|(n, _)| n.strip_prefix(prefix.as_str()))
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no '{key}' entry")))
    }

    pub fn set_scalar(&mut self, name: &str, v: f32) {
        self.entries.retain(|(n, _)| n != name);
        self.push(name, Tensor::scalar(v));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        match self.get(name) {
            Some(t) if t.len() == 1 => Ok(t.data[0]),
            Some(t) => Err(Error::shape(format!("checkpoint scalar {name}"), 1, t.len())),
            None => Err(Error::InvalidArgument(format!("checkpoint has no '{name}' entry"))),
        }
    }

    pub fn add_params(&mut self, ps: &ParamSet<f32>) {
        self.add_params_prefixed("", ps);
    }

    pub fn add_params_prefixed(&mut self, prefix: &str, ps: &ParamSet<f32>) {
        for (n, t) in ps.names().iter().zip(ps.tensors()) {
            self.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Fill `ps` from entries with matching names; every parameter must be present with its shape.
    pub fn load_params(&self, ps: &mut ParamSet<f32>) -> Result<()> {
        self.load_params_prefixed("", ps)
    }

    pub fn load_params_prefixed(&self, prefix: &str, ps: &mut ParamSet<f32>) -> Result<()> {
        for i in 0..ps.len() {
            let name = format!("{prefix}{}", ps.name(i));
            let src = self
                .get(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing parameter '{name}'")))?;
            let dst = ps.get_mut(i);
            if src.shape != dst.shape {
                return Err(Error::shape(format!("checkpoint parameter {name}"), format!("{:?}", dst.shape), format!("{:?}", src.shape)));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    pub fn add_optimizer(&mut self, ps: &ParamSet<f32>, opt: &AdamW<f32>) {
        for (i, n) in ps.names().iter().enumerate() {
            self.push(format!("{n}.m"), opt.m[i].clone());
            self.push(format!("{n}.v"), opt.v[i].clone());
        }
        self.set_scalar("step", opt.step as f32);
    }

    pub fn load_optimizer(&self, ps: &ParamSet<f32>, config: AdamWConfig) -> Result<AdamW<f32>> {
        let mut opt = AdamW::new(ps, config);
        for (i, n) in ps.names().iter().enumerate() {
            for (suffix, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let key = format!("{n}.{suffix}");
                let src = self.get(&key).ok_or_else(|| Error::InvalidArgument(format!("checkpoint is missing '{key}'")))?;
                if src.shape != dst.shape {
                    return Err(Error::shape(key, format!("{:?}", dst.shape), format!("{:?}", src.shape)));
                }
                dst.data.copy_from_slice(&src.data);
            }
        }
        opt.step = self.scalar("step")? as u64;
        Ok(opt)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.str16(name)?;
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::InvalidArgument(format!("tensor {name} has rank {}", t.shape.len())));
            }
            w.u8(t.shape.len() as u8);
            for &d in &t.shape {
                w.u32(d as u32);
            }
            w.f32s(&t.data);
        }
        Ok(w.into_bytes())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("CKP1", bytes);
        r.magic(MAGIC)?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str16()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = match len {
                Some(l) if l.saturating_mul(4) <= r.remaining() => l,
                _ => return Err(r.error(format!("tensor {name} of shape {shape:?} exceeds the file"))),
            };
            let data = r.f32s(len)?;
            entries.push((name, Tensor { shape, data }));
        }
        r.finish()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&binio::read_file(path)?)
    }
}
