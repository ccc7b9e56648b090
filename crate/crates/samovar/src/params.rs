//! Named parameter storage. Each training step builds a fresh graph, so
//! trainable values live here as plain buffers and are re-bound as leaf
//! tensors per step; after backward, gradients are read back through the
//! bound handles. Insertion order is stable (checkpoint layout, optimizer
//! state slots, and parameter counts all rely on it).

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Graph, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("parameter {0:?} not found")]
    Missing(String),
    #[error("parameter {name:?}: {got} values do not fill shape {shape:?}")]
    BadShape { name: String, shape: Vec<usize>, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub value: Vec<S>,
    pub shape: Vec<usize>,
}

/// Ordered name → buffer map of all trainable parameters of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamVault<S: Scalar> {
    entries: IndexMap<String, ParamEntry<S>>,
}

impl<S: Scalar> ParamVault<S> {
    pub fn new() -> Self {
        ParamVault { entries: IndexMap::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], value: Vec<S>) -> Result<(), ParamError> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(ParamError::BadShape { name: name.into(), shape: shape.to_vec(), got: value.len() });
        }
        if self.entries.contains_key(name) {
            return Err(ParamError::Duplicate(name.into()));
        }
        self.entries.insert(name.into(), ParamEntry { value, shape: shape.to_vec() });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<S>, ParamError> {
        self.entries.get(name).ok_or_else(|| ParamError::Missing(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<S>, ParamError> {
        self.entries.get_mut(name).ok_or_else(|| ParamError::Missing(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Bind every parameter as a differentiable leaf on `g`, preserving order.
    pub fn bind_all(&self, g: &Graph<S>) -> Result<Bound<S>, ParamError> {
        let mut map = IndexMap::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            map.insert(name.clone(), g.leaf(e.value.clone(), &e.shape)?);
        }
        Ok(Bound { map })
    }

    /// Convert every buffer to another precision.
    pub fn cast<T: Scalar>(&self) -> ParamVault<T> {
        let entries = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    ParamEntry {
                        value: e.value.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
                        shape: e.shape.clone(),
                    },
                )
            })
            .collect();
        ParamVault { entries }
    }
}

/// Leaf tensors for one graph, keyed by parameter name.
pub struct Bound<S: Scalar> {
    map: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn get(&self, name: &str) -> Result<Tensor<S>, ParamError> {
        self.map.get(name).cloned().ok_or_else(|| ParamError::Missing(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Samples `n` values from `Normal(0, std²)`.
pub fn normal_init<S: Scalar>(rng: &mut impl Rng, n: usize, std: f64) -> Vec<S> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..n).map(|_| S::from_f64(dist.sample(rng))).collect()
}

pub fn zeros<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::zero(); n]
}

pub fn ones<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::one(); n]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn register_bind_and_read_gradients() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        vault.register("b", &[2], vec![0.5, -0.5]).unwrap();
        assert_eq!(vault.total_params(), 6);

        let g = Graph::new();
        let bound = vault.bind_all(&g).unwrap();
        let w = bound.get("w").unwrap();
        let b = bound.get("b").unwrap();
        let loss = w.matmul(&b.reshape(&[2, 1]).unwrap()).unwrap().sum_all().unwrap();
        loss.backward().unwrap();
        assert!(w.grad().is_some());
        assert!(b.grad().is_some());
    }

    #[test]
    fn duplicate_and_missing_names_are_errors() {
        let mut vault: ParamVault<f32> = ParamVault::new();
        vault.register("w", &[1], vec![0.0]).unwrap();
        assert!(matches!(vault.register("w", &[1], vec![0.0]), Err(ParamError::Duplicate(_))));
        assert!(matches!(vault.get("nope"), Err(ParamError::Missing(_))));
    }

    #[test]
    fn shape_and_value_counts_must_agree() {
        let mut vault: ParamVault<f32> = ParamVault::new();
        assert!(matches!(
            vault.register("w", &[2, 3], vec![0.0; 5]),
            Err(ParamError::BadShape { .. })
        ));
    }

    #[test]
    fn insertion_order_is_preserved() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        for name in ["z", "a", "m"] {
            vault.register(name, &[1], vec![0.0]).unwrap();
        }
        let names: Vec<&str> = vault.iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["z", "a", "m"]);
    }

    #[test]
    fn normal_init_is_seeded_and_scaled() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = normal_init(&mut r1, 4000, 0.02);
        let b: Vec<f64> = normal_init(&mut r2, 4000, 0.02);
        assert_eq!(a, b);
        let var = a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
        assert!((var.sqrt() - 0.02).abs() < 0.002, "std {}", var.sqrt());
    }

    #[test]
    fn cast_roundtrip_preserves_shapes() {
        let mut vault: ParamVault<f64> = ParamVault::new();
        vault.register("w", &[3], vec![0.25, -0.5, 1.0]).unwrap();
        let f32v: ParamVault<f32> = vault.cast();
        assert_eq!(f32v.get("w").unwrap().value, vec![0.25f32, -0.5, 1.0]);
    }
}
