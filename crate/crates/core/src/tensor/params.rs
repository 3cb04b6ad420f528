use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// The (rows, cols) view used by the graph: vectors are single rows,
    /// higher-rank arrays fold trailing axes into columns.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Invalid(format!(
                "parameter {name}: shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Uniform init in ±1/√fan_in, where fan_in is the product of trailing axes.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.by_name.get(name).map(|id| &self.params[id.0])
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].data
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replace a parameter's value and shape in place (used by vocabulary extension).
    pub fn replace(&mut self, id: ParamId, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Invalid(format!(
                "parameter {}: shape {shape:?} needs {expected} values",
                self.params[id.0].name
            )));
        }
        let p = &mut self.params[id.0];
        p.shape = shape;
        p.data = data;
        Ok(())
    }
}

/// Per-parameter boolean: `true` means the optimizer may update it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainableMask(pub Vec<bool>);

impl TrainableMask {
    pub fn all(store: &ParamStore) -> Self {
        TrainableMask(vec![true; store.len()])
    }

    /// Trainable iff `pred(name)` holds.
    pub fn from_fn(store: &ParamStore, pred: impl Fn(&str) -> bool) -> Self {
        TrainableMask(store.names().map(pred).collect())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.0.get(id.0).copied().unwrap_or(false)
    }

    pub fn trainable_names<'a>(&'a self, store: &'a ParamStore) -> Vec<&'a str> {
        store
            .iter()
            .filter(|(id, _)| self.is_trainable(*id))
            .map(|(_, p)| p.name.as_str())
            .collect()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn slot(&mut self, id: ParamId, len: usize) -> &mut [f64] {
        self.grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// `self += other`, elementwise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global norm is at most `max_norm`. Returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().flat_map(|g| g.iter()).all(|v| v.is_finite())
    }
}
