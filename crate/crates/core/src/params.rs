//! Named parameter storage shared by every layer, plus gradient buffers.

use indexmap::IndexMap;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered map from parameter name to tensor. The order is the
/// declared order used by checkpoints and optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Conflict(name));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Panics if `name` is absent; layer keys are fixed at construction.
    pub fn get(&self, name: &str) -> &Tensor {
        match self.entries.get(name) {
            Some(p) => &p.value,
            None => panic!("parameter {name} is not registered"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.entries.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// FNV-1a over names, shapes and raw bits of every frozen tensor.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in &self.entries {
            if p.trainable {
                continue;
            }
            feed(name.as_bytes());
            for d in p.value.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Gradients for trainable parameters, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: HashMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the buffer for `name`, creating it on first use.
    pub fn accumulate(&mut self, name: &str, grad: &[f32], shape: &[usize]) {
        match self.map.get_mut(name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                let t = Tensor::new(shape.to_vec(), grad.to_vec())
                    .expect("gradient shape matches parameter");
                self.map.insert(name.to_string(), t);
            }
        }
    }

    /// Mutable buffer for `name`, zero-initialized with `shape` on first use.
    pub fn entry(&mut self, name: &str, shape: &[usize]) -> &mut Tensor {
        self.map
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.map {
            match self.map.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.map.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for t in self.map.values_mut() {
            t.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}
