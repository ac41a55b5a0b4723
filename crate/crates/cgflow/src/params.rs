//! Named parameter tensors with a stable iteration order.
//!
//! The store doubles as a gradient accumulator: `zeros_like` produces a
//! structurally identical store, and the axpy/scale helpers operate
//! entry-wise across matching names.

use std::collections::HashMap;

use crate::error::{CgError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter tensor. Names must be unique and values finite.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(CgError::Config(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_all_finite() {
            return Err(CgError::NonFinite {
                context: format!("parameter {name:?}"),
            });
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.values[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            index: self.index.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    /// Accumulates `grad` into the tensor registered under `name`.
    /// Missing names are ignored so evaluation-only tapes can report
    /// gradients for a subset of the store.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) {
        if let Some(i) = self.index.get(name) {
            self.values[*i].add_assign(grad);
        }
    }

    /// self += a * other, matched by structure (same names, same order).
    pub fn axpy(&mut self, a: f64, other: &ParamStore) {
        assert_eq!(self.names, other.names, "param store structure");
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            s.axpy(a, o);
        }
    }

    pub fn scale_assign(&mut self, a: f64) {
        for v in &mut self.values {
            v.scale_assign(a);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_all_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_is_stable() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::zeros(1, 2)).unwrap();
        store.insert("a", Tensor::zeros(2, 2)).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(store.total_len(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(1, 1)).unwrap();
        assert!(store.insert("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn non_finite_parameters_rejected() {
        let mut store = ParamStore::new();
        let bad = Tensor::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(store.insert("w", bad).is_err());
    }
}
