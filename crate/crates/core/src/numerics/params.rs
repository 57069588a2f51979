//! Named parameter storage and the `PAMTCKPT1` checkpoint container.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! PAMTCKPT1\n
//! <entry count>\n
//! <name>\t<dim,dim,...>\tf64\t<byte offset>\n     (one line per entry)
//! END\n
//! <little-endian f64 blob>
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{contract, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "PAMTCKPT1";

#[derive(Clone, Debug)]
pub struct Param {
    value: Arc<Tensor>,
    pub(crate) grad: Tensor,
    frozen: bool,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value: Arc::new(value),
            grad,
            frozen: false,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Ordered map of trainable tensors with per-name freeze flags.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: BTreeMap<String, Param>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Param::new(value));
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params
            .remove(name)
            .map(|p| Arc::try_unwrap(p.value).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(name)?.value())
    }

    /// Mutable access to a parameter value; clones if a graph still holds it.
    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
        Ok(Arc::make_mut(&mut p.value))
    }

    #[cfg(test)]
    pub(crate) fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub(crate) fn value_and_grad_mut(&mut self, name: &str) -> Option<(&mut Tensor, &Tensor)> {
        self.params
            .get_mut(name)
            .map(|p| (Arc::make_mut(&mut p.value), &p.grad))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter `{name}`")))?;
        p.frozen = frozen;
        Ok(())
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.params.values_mut().for_each(|p| p.frozen = true);
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Replace stored gradients with those of a backward pass. Parameters
    /// that were not reached get zero gradients.
    pub fn load_grads(&mut self, grads: &Gradients) -> Result<()> {
        self.zero_grads();
        for (name, p) in self.params.iter_mut() {
            if let Some(g) = grads.param(name) {
                if g.len() != p.grad.numel() {
                    return Err(contract(format!("gradient size mismatch for `{name}`")));
                }
                p.grad.data_mut().copy_from_slice(g);
            }
        }
        Ok(())
    }

    /// Merge another set into this one (names must not collide).
    pub fn extend(&mut self, other: ParameterSet) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(contract(format!("duplicate parameter `{name}`")));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }

    /// Subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{CHECKPOINT_MAGIC}\n{}\n", self.params.len());
        let mut offset = 0usize;
        for (name, p) in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("{name}\t{}\tf64\t{offset}\n", dims.join(",")));
            offset += p.value.numel() * 8;
        }
        header.push_str("END\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for p in self.params.values() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "checkpoint",
            detail: detail.to_string(),
        };
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not utf-8"))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != CHECKPOINT_MAGIC {
            return Err(bad("missing PAMTCKPT1 header"));
        }
        let count: usize = next_line()?.parse().map_err(|_| bad("entry count"))?;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields[2] != "f64" {
                return Err(bad(&format!("manifest line `{line}`")));
            }
            let shape: Vec<usize> = if fields[1].is_empty() {
                Vec::new()
            } else {
                fields[1]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad("dimension")))
                    .collect::<Result<_>>()?
            };
            let offset: usize = fields[3].parse().map_err(|_| bad("offset"))?;
            entries.push((fields[0].to_string(), shape, offset));
        }
        if next_line()? != "END" {
            return Err(bad("missing END marker"));
        }
        let blob = &bytes[pos..];
        let mut params = BTreeMap::new();
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > blob.len() {
                return Err(bad(&format!("blob too short for `{name}`")));
            }
            let data = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Param::new(Tensor::new(shape, data)?));
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint (hex).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Digest restricted to parameters whose names start with `prefix`.
    pub fn digest_prefix(&self, prefix: &str) -> String {
        self.subset(prefix).digest()
    }
}
