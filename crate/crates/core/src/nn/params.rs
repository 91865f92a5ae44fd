use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

pub type Mat = Array2<f64>;

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Insertion order is preserved and is the order used for serialization and
/// optimizer state, so two stores built by the same code are layout-identical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on a duplicate name: parameter names are
    /// fixed by model code, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Xavier/Glorot uniform initialisation.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Mat::zeros((rows, cols)))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> ParamId {
        self.add(name, Mat::from_elem((rows, cols), fill))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(
            self.values[id.0].dim(),
            value.dim(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// True when every entry of every tensor is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Gradient accumulator indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self {
            slots: vec![None; n_params],
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.len())
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Mat {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        self.slots[id.0].get_or_insert_with(|| Mat::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Mat) {
        let slot = self.slot_mut(id, grad.dim());
        *slot += grad;
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn clear(&mut self, id: ParamId) {
        if let Some(slot) = self.slots.get_mut(id.0) {
            *slot = None;
        }
    }
}
