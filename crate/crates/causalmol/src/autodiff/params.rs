//! Named trainable tensors and their gradients.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::tensor::{Tensor, TensorError};

/// Ordered map of named trainable tensors. Insertion order is the iteration
/// order, which keeps gradient accumulation and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: IndexMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParameterStore {
    pub fn new(rng_seed: u64) -> Self {
        ParameterStore { entries: IndexMap::new(), rng_seed }
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor) -> Result<(), TensorError> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Invalid(format!("duplicate parameter `{name}`")));
        }
        tensor.requires_grad = true;
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Overwrite one element; used by the finite-difference checker.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) {
        let t = self.entries.get_mut(name).expect("known parameter");
        t.values_mut()[index] += delta;
    }

    pub fn to_serializable(&self) -> IndexMap<String, SerializedTensor> {
        self.entries
            .iter()
            .map(|(k, v)| {
                (k.clone(), SerializedTensor { shape: v.shape().to_vec(), values: v.values().to_vec() })
            })
            .collect()
    }

    pub fn from_serializable(
        rng_seed: u64,
        entries: &IndexMap<String, SerializedTensor>,
    ) -> Result<Self, TensorError> {
        let mut store = ParameterStore::new(rng_seed);
        for (name, st) in entries {
            store.insert(name, Tensor::new(st.shape.clone(), st.values.clone())?)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SerializedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Gradients keyed by parameter name; shapes match the owning store.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: IndexMap<String, Tensor>,
}

impl GradientMap {
    pub fn zeros_like(params: &ParameterStore) -> Self {
        let entries = params
            .iter()
            .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
            .collect();
        GradientMap { entries }
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.entries.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// self += scale * other, elementwise over shared names.
    pub fn add_scaled(&mut self, other: &GradientMap, scale: f64) {
        for (name, g) in &other.entries {
            if let Some(acc) = self.entries.get_mut(name) {
                for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            for v in g.values_mut() {
                *v *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// One gradient-descent step: `value - lr * grad` per entry. Entries with no
/// gradient are treated as zero-gradient and copied unchanged. Returns a new
/// store so the pre-step parameters stay usable.
pub fn sgd_step(
    params: &ParameterStore,
    grads: &GradientMap,
    lr: f64,
) -> Result<ParameterStore, TensorError> {
    if lr < 0.0 {
        return Err(TensorError::Invalid(format!("negative learning rate {lr}")));
    }
    let mut out = ParameterStore::new(params.rng_seed);
    for (name, t) in params.iter() {
        let mut values = t.values().to_vec();
        if let Some(g) = grads.get(name) {
            if g.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step".into(),
                    detail: format!("`{name}`: {:?} vs grad {:?}", t.shape(), g.shape()),
                });
            }
            for (v, gv) in values.iter_mut().zip(g.values()) {
                *v -= lr * gv;
            }
        }
        out.insert(name, Tensor::new(t.shape().to_vec(), values)?)?;
    }
    Ok(out)
}
