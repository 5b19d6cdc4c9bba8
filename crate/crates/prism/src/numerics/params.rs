use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;
use crate::{Error, Result};

/// Ordered, named parameter store. Insertion order is the canonical order
/// used for gradient vectors and optimizer state.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[*self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
        &mut self.tensors[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// SHA-256 over names, shapes, and little-endian payloads. Used to verify
    /// frozen-module contracts bit-exactly.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.le_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters bound onto a tape for one forward pass.
pub struct BoundParams<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> BoundParams<'a> {
    /// Register every parameter as a tape leaf, in canonical order.
    pub fn bind(tape: &mut Tape, set: &'a ParamSet, trainable: bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(set.len());
        for (_, t) in set.iter() {
            vars.push(tape.leaf(t, trainable)?);
        }
        Ok(BoundParams { set, vars })
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .set
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collect per-parameter gradients in canonical order; absent entries
    /// (non-participating parameters) become zero.
    pub fn grads(&self, grads: &crate::numerics::tape::Gradients) -> Vec<Vec<f32>> {
        self.vars
            .iter()
            .zip(self.set.tensors.iter())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect()
    }
}

/// Shape-checked gradient map keyed like its ParamSet.
pub fn check_grads_finite(grads: &[Vec<f32>]) -> Result<()> {
    for g in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "gradient".into(), phase: "backward" });
        }
    }
    Ok(())
}
