//! Named parameter storage shared by every trainable network.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor as a graph leaf; `trainable` selects whether
    /// gradients flow to them.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn to_stored(&self) -> Vec<StoredTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| StoredTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect()
    }

    /// Overwrite values from stored tensors, matching by position, name and shape.
    pub fn load_stored(&mut self, stored: &[StoredTensor]) -> Result<(), String> {
        if stored.len() != self.tensors.len() {
            return Err(format!("expected {} tensors, found {}", self.tensors.len(), stored.len()));
        }
        for ((name, t), s) in self.names.iter().zip(self.tensors.iter_mut()).zip(stored) {
            if &s.name != name || s.shape != t.shape() {
                return Err(format!("tensor {name} {:?} does not match stored {} {:?}", t.shape(), s.name, s.shape));
            }
            t.data_mut().copy_from_slice(&s.data);
        }
        Ok(())
    }

    /// Hash of names, shapes and exact value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
