use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors. Buffers (normalization running statistics) live
/// here too but are skipped by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, name: &str, value: Matrix<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add(&mut self, name: &str, value: Matrix<T>) -> Result<ParamId> {
        self.push(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Matrix<T>) -> Result<ParamId> {
        self.push(name, value, false)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Matrix<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn assign(&mut self, name: &str, value: Matrix<T>) -> Result<()> {
        let id = self.id(name)?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Matrix::cast).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub(crate) slots: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            self.scale(T::of(max_norm / n));
        }
        n
    }
}
