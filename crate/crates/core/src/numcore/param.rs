//! Named parameter storage.

use std::collections::BTreeMap;

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    pub trainable: bool,
    /// Per-entry mask; `false` entries never change during an optimizer step.
    pub freeze_mask: Option<Vec<bool>>,
}

impl<T: Real> ParamTensor<T> {
    pub fn new(name: impl Into<String>, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
            freeze_mask: None,
        }
    }
}

/// Ordered collection of parameters addressed by [`ParamId`] or name.
///
/// Insertion order is the canonical order used by the optimizer, checkpoints
/// and gradient checks.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<ParamTensor<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(ParamTensor::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &ParamTensor<T> {
        &self.params[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamTensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor<T>> {
        self.params.iter_mut()
    }

    /// Replaces a parameter's value (shape may change); the gradient is reset.
    pub fn replace(&mut self, id: ParamId, value: Matrix<T>) {
        let p = &mut self.params[id.0];
        p.grad = Matrix::zeros(value.rows(), value.cols());
        p.freeze_mask = None;
        p.value = value;
    }

    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Copies accumulated gradients into the tensors; frozen tensors get zeros.
    pub fn load_grads(&mut self, grads: &Grads<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            match g {
                Some(g) if p.trainable => p.grad.clone_from(g),
                _ => p.grad.data_mut().fill(T::zero()),
            }
        }
    }

    pub fn values(&self) -> Vec<Matrix<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, values: &[Matrix<T>]) {
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value.clone_from(v);
        }
    }
}

/// Sparse gradient accumulator parallel to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<T>(Vec<Option<Matrix<T>>>);

impl<T: Real> Grads<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self(vec![None; store.len()])
    }

    pub fn acc(&mut self, id: ParamId, g: &Matrix<T>) {
        match &mut self.0[id.0] {
            Some(existing) => existing
                .add_assign(g)
                .expect("gradient shape matches parameter"),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Mutable access, allocating a zero gradient of the given shape on first use.
    pub fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix<T> {
        self.0[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.0[id.0].as_ref()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.0.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (i, g) in other.0.iter().enumerate() {
            if let Some(g) = g {
                self.acc(ParamId(i), g);
            }
        }
    }
}
