//! Named-tensor checkpoints.
//!
//! Byte layout, integers little-endian: magic `E2EMCKPT`, version `u32`,
//! tensor count `u32`, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` rank, `rank` dimensions as `u32`, and the payload as `f32`.
//!
//! Values are rounded to `f32` when captured, so an in-memory checkpoint and
//! its reloaded file are identical.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{named, named_mut, ParamTree};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"E2EMCKPT";
pub const VERSION: u32 = 1;

const META: &str = "meta.";
const ADAM: &str = "adam.";

/// Selection record stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture<P: ParamTree<Tensor>>(params: &P, adam: Option<&Adam>, meta: CheckpointMeta) -> Self {
        let mut tensors: Vec<(String, Tensor)> = named(params)
            .into_iter()
            .map(|(n, t)| (n, t.to_f32_precision()))
            .collect();
        if let Some(adam) = adam {
            let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
            tensors.push(("adam.t".into(), Tensor::scalar(adam.t as f64)));
            tensors.push(("adam.iterations".into(), Tensor::scalar(adam.iterations as f64)));
            for (name, (m, v)) in names.iter().zip(adam.m.iter().zip(&adam.v)) {
                tensors.push((format!("adam.m.{name}"), m.to_f32_precision()));
                tensors.push((format!("adam.v.{name}"), v.to_f32_precision()));
            }
        }
        tensors.push(("meta.val_accuracy".into(), Tensor::scalar(meta.val_accuracy).to_f32_precision()));
        tensors.push(("meta.val_loss".into(), Tensor::scalar(meta.val_loss).to_f32_precision()));
        tensors.push(("meta.stage".into(), Tensor::scalar(meta.stage as f64)));
        Checkpoint { tensors }
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        self.get(name)
            .map(|t| t.data()[0])
            .ok_or_else(|| Error::Validation(format!("checkpoint has no `{name}` entry")))
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            val_accuracy: self.scalar("meta.val_accuracy")?,
            val_loss: self.scalar("meta.val_loss")?,
            stage: self.scalar("meta.stage")? as usize,
        })
    }

    fn param_entries(&self) -> impl Iterator<Item = &(String, Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(META) && !n.starts_with(ADAM))
    }

    /// Copies stored weights into `params`. Every model tensor must be present
    /// with its exact shape, and the checkpoint may hold no other weights.
    pub fn restore_params<P: ParamTree<Tensor>>(&self, params: &mut P) -> Result<()> {
        let mut slots = named_mut(params);
        let wanted: HashSet<&str> = slots.iter().map(|(n, _)| n.as_str()).collect();
        if let Some((extra, _)) = self.param_entries().find(|(n, _)| !wanted.contains(n.as_str())) {
            return Err(Error::Validation(format!("checkpoint tensor `{extra}` has no counterpart in the model")));
        }
        for (name, slot) in &slots {
            let stored = self
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape() != slot.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: stored.shape().to_vec(),
                });
            }
        }
        for (name, slot) in slots.iter_mut() {
            **slot = self.get(name).unwrap().clone();
        }
        Ok(())
    }

    /// Restores moments and counters saved for `params`' layout.
    pub fn restore_adam<P: ParamTree<Tensor>>(&self, params: &P, adam: &mut Adam) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = named(params)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            for (prefix, out) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                let key = format!("{prefix}{name}");
                let t = self
                    .get(&key)
                    .ok_or_else(|| Error::Validation(format!("checkpoint is missing tensor `{key}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                out.push(t.clone());
            }
        }
        adam.t = self.scalar("adam.t")? as u64;
        adam.iterations = self.scalar("adam.iterations")? as u64;
        adam.m = m;
        adam.v = v;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for i in 0..count {
            let start = r.offset;
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(start + 2, format!("tensor {i} name is not UTF-8")))?
                .to_string();
            if name.is_empty() {
                return Err(Error::format(start, format!("tensor {i} has an empty name")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::format(start, format!("duplicate tensor `{name}`")));
            }
            let rank_at = r.offset;
            let rank = r.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(Error::format(rank_at, format!("tensor `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let at = r.offset;
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return Err(Error::format(at, format!("tensor `{name}` has a zero dimension")));
                }
                shape.push(d);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format(rank_at, format!("tensor `{name}` shape {shape:?} overflows")))?;
            let payload = r.take(n, &format!("payload of `{name}`"))?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.offset != bytes.len() {
            return Err(Error::format(
                r.offset,
                format!("{} trailing bytes after the last tensor", bytes.len() - r.offset),
            ));
        }
        Ok(Checkpoint { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.offset,
                format!(
                    "truncated reading {what}: expected at least {} bytes, file has {}",
                    self.offset.saturating_add(n),
                    self.bytes.len()
                ),
            )
        })?;
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
