use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scalar;

/// Handle to one named parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Flat storage for all learnable arrays of a network plus their gradients.
///
/// Keeping everything in one contiguous buffer makes the optimizer, gradient
/// clipping, checkpointing and finite-difference checks simple loops.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry>,
    values: Vec<S>,
    grads: Vec<S>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers an array initialised uniformly on `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(&mut self, name: String, shape: Vec<usize>, bound: f64, rng: &mut R) -> ParamId {
        let len: usize = shape.iter().product();
        let init = (0..len).map(|_| S::of(rng.random_range(-bound..=bound)));
        self.push(name, shape, init)
    }

    pub fn add_constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let len: usize = shape.iter().product();
        self.push(name, shape, std::iter::repeat_n(S::of(value), len))
    }

    fn push(&mut self, name: String, shape: Vec<usize>, init: impl Iterator<Item = S>) -> ParamId {
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        let offset = self.values.len();
        self.values.extend(init);
        let len = self.values.len() - offset;
        self.grads.resize(self.values.len(), S::zero());
        self.entries.push(ParamEntry {
            name,
            shape,
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[S] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [S] {
        let e = &self.entries[id.0];
        &mut self.grads[e.offset..e.offset + e.len]
    }

    /// Value slice and gradient slice of the same parameter.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&[S], &mut [S]) {
        let e = &self.entries[id.0];
        let range = e.offset..e.offset + e.len;
        (&self.values[range.clone()], &mut self.grads[range])
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn grads(&self) -> &[S] {
        &self.grads
    }

    /// Simultaneous mutable values and shared gradients, for optimizer steps.
    pub fn values_and_grads_mut(&mut self) -> (&mut [S], &mut [S]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = S::zero());
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Replaces every value, keeping the layout. Panics on length mismatch.
    pub fn load_values(&mut self, values: &[S]) {
        assert_eq!(values.len(), self.values.len());
        self.values.copy_from_slice(values);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}
