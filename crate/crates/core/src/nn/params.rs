use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of 2-D parameter tensors with a per-tensor
/// trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn expect_id(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Format(format!("missing parameter tensor `{name}`")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.values[id.0]))
    }

    pub fn trainable_count(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of the selected
    /// tensors, in store order.
    pub fn checksum(&self, filter: impl Fn(ParamId, &str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (id, name, value) in self.iter() {
            if !filter(id, name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum(|id, _| !self.is_trainable(id))
    }

    pub fn remove_where(&mut self, drop: impl Fn(&str) -> bool) {
        let mut kept = ParamStore::new();
        for i in 0..self.values.len() {
            if !drop(&self.names[i]) {
                kept.insert(self.names[i].clone(), self.values[i].clone(), self.trainable[i]);
            }
        }
        *self = kept;
    }
}

pub fn zeros(rows: usize, cols: usize) -> Mat {
    Mat::zeros((rows, cols))
}

pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Mat {
    let normal = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// Glorot-style normal init for a `(d_out, d_in)` weight.
pub fn glorot(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Mat {
    randn(d_out, d_in, (2.0 / (d_in + d_out) as f64).sqrt(), rng)
}
