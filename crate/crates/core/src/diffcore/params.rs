use std::collections::HashMap;

use super::{Array, DiffError};

/// Handle to a learnable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Array,
    grad: Vec<f64>,
}

/// Named learnable arrays in insertion order, each with a gradient accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let idx = self.entries.len();
        let grad = vec![0.0; value.len()];
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Entry { name, value, grad });
        Ok(ParamId(idx))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    /// Mutable view of the values. The shape stays fixed.
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].value.data_mut()
    }

    /// Replaces a parameter's values; the new array must keep the original shape.
    pub fn set_value(&mut self, id: ParamId, value: Array) -> Result<(), DiffError> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let acc = &mut self.entries[id.0].grad;
        debug_assert_eq!(acc.len(), grad.len());
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), DiffError> {
        if self.entries.len() != other.entries.len() {
            return Err(DiffError::Invalid {
                op: "copy_values_from",
                msg: format!("{} vs {} parameters", self.entries.len(), other.entries.len()),
            });
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(DiffError::Invalid {
                    op: "copy_values_from",
                    msg: format!("layout differs at {}", dst.name),
                });
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}
