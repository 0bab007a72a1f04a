//! Named parameter storage and gradient buffers.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Which part of a model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Pre-trained, frozen detector stub.
    Detector,
    /// Feature extraction and entity prediction, upstream of the relation predictor.
    Backbone,
    /// Relation predictor body, shared by the original and mirrored branches.
    RelationPredictor,
    /// Final projection of the original relation predictor.
    OriginalHead,
    /// Mirrored-branch projection, trained only by the alignment loss.
    UntiedHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value, frozen: false });
        id
    }

    /// Glorot-uniform weights.
    pub fn add_glorot(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a));
        self.add(name, group, w)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> ParamId {
        use rand_distr::{Distribution, StandardNormal};
        let w = Array2::from_shape_simple_fn((rows, cols), || std * Distribution::<f64>::sample(&StandardNormal, rng));
        self.add(name, group, w)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.entries().filter(|(_, e)| e.group == group).map(|(id, _)| id).collect()
    }

    pub fn freeze_group(&mut self, group: ParamGroup) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.frozen = true;
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.entries[id.0].frozen = true;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Flat view of every scalar, in id order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.iter().copied()).collect()
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }
}

/// Per-parameter gradient accumulators. Absent entries are exact zeros.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads { slots: vec![None; store.len()] }
    }

    pub fn with_len(n: usize) -> Self {
        Grads { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Mat) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every coordinate of `id` is exactly `0.0` (or untouched).
    pub fn is_exact_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.iter().all(|&v| v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
