//! Scene-graph domain types and their JSON-lines encoding.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the "no relation" class in every predicate distribution.
pub const BACKGROUND: usize = 0;

/// Tolerance used when checking that a distribution sums to one.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Axis-aligned box in normalized `[0, 1]` coordinates.
///
/// Encoded as a bare `[x_min, y_min, x_max, y_max]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(a: [f64; 4]) -> Self {
        BoundingBox { x_min: a[0], y_min: a[1], x_max: a[2], y_max: a[3] }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BoundingBox { x_min, y_min, x_max, y_max }
    }

    pub fn is_valid(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && [self.x_min, self.y_min, self.x_max, self.y_max].into_iter().all(in_unit)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        (*self).into()
    }

    /// Grid cells `(row, col)` covered by the box on an `h × w` grid.
    ///
    /// A cell is covered when its center lies inside the box; at least one
    /// cell is always returned.
    pub fn cells(&self, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
        let to_range = |lo: f64, hi: f64, n: usize| {
            let a = ((lo * n as f64) - 0.5).ceil().max(0.0) as usize;
            let b = ((hi * n as f64) - 0.5).floor().min(n as f64 - 1.0) as usize;
            let a = a.min(n - 1);
            if b < a {
                (a, a)
            } else {
                (a, b)
            }
        };
        let (r0, r1) = to_range(self.y_min, self.y_max, h);
        let (c0, c1) = to_range(self.x_min, self.x_max, w);
        (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub instance_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationTriplet {
    pub subject_id: u64,
    pub object_id: u64,
    pub predicate_id: usize,
}

/// `H × W × d` feature grid stored row-major as nested arrays.
pub type FeatureGrid = Vec<Vec<Vec<f64>>>;

/// One synthetic image: a feature grid with its ground-truth scene graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    pub sample_id: u64,
    pub feature_grid: FeatureGrid,
    pub entities: Vec<Entity>,
    pub relations: Vec<RelationTriplet>,
}

impl SceneSample {
    pub fn grid_shape(&self) -> (usize, usize, usize) {
        let h = self.feature_grid.len();
        let w = self.feature_grid.first().map_or(0, |r| r.len());
        let d = self.feature_grid.first().and_then(|r| r.first()).map_or(0, |c| c.len());
        (h, w, d)
    }

    pub fn entity_index(&self, instance_id: u64) -> Option<usize> {
        self.entities.iter().position(|e| e.instance_id == instance_id)
    }

    /// Mean feature vector over the cells covered by `bbox`.
    pub fn pool(&self, bbox: &BoundingBox) -> Vec<f64> {
        let (h, w, d) = self.grid_shape();
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for (r, c) in bbox.cells(h, w) {
            for (a, v) in acc.iter_mut().zip(&self.feature_grid[r][c]) {
                *a += v;
            }
            n += 1;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        acc
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("sample serialization cannot fail")
    }
}

/// Outcome of [`validate_sample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Violations(Vec<String>),
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Ok)
    }

    pub fn violations(&self) -> &[String] {
        match self {
            Verdict::Ok => &[],
            Verdict::Violations(v) => v,
        }
    }
}

/// Class-count limits a sample is checked against. `None` skips the check.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassLimits {
    pub num_object_classes: Option<usize>,
    pub num_predicates: Option<usize>,
}

pub fn validate_sample(sample: &SceneSample) -> Verdict {
    validate_sample_with(sample, ClassLimits::default())
}

pub fn validate_sample_with(sample: &SceneSample, limits: ClassLimits) -> Verdict {
    let mut out = Vec::new();

    let (h, w, d) = sample.grid_shape();
    let ragged = sample
        .feature_grid
        .iter()
        .any(|row| row.len() != w || row.iter().any(|cell| cell.len() != d));
    if ragged {
        out.push("ragged feature grid".to_string());
    }
    if sample.feature_grid.iter().flatten().flatten().any(|v| !v.is_finite()) {
        out.push("non-finite feature value".to_string());
    }
    if h == 0 || w == 0 || d == 0 {
        out.push("empty feature grid".to_string());
    }

    let mut ids = HashSet::new();
    for e in &sample.entities {
        if !ids.insert(e.instance_id) {
            out.push(format!("duplicate instance_id {}", e.instance_id));
        }
        if !e.bbox.is_valid() {
            out.push(format!("invalid box on instance {}", e.instance_id));
        }
        if let Some(c) = limits.num_object_classes {
            if e.class_id >= c {
                out.push(format!("class_id {} out of range on instance {}", e.class_id, e.instance_id));
            }
        }
    }

    let mut pairs = HashSet::new();
    for r in &sample.relations {
        if r.subject_id == r.object_id {
            out.push(format!("self-loop on instance {}", r.subject_id));
        }
        for id in [r.subject_id, r.object_id] {
            if !ids.contains(&id) {
                out.push(format!("dangling reference to instance {id}"));
            }
        }
        if !pairs.insert((r.subject_id, r.object_id)) {
            out.push(format!("duplicate relation for pair ({}, {})", r.subject_id, r.object_id));
        }
        if r.predicate_id == BACKGROUND {
            out.push("ground-truth relation carries the background predicate".to_string());
        }
        if let Some(c) = limits.num_predicates {
            if r.predicate_id >= c {
                out.push(format!("predicate_id {} out of range", r.predicate_id));
            }
        }
    }

    if out.is_empty() {
        Verdict::Ok
    } else {
        Verdict::Violations(out)
    }
}

/// Normalized probability vector over predicate classes, background at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateDistribution {
    probs: Vec<f64>,
}

impl PredicateDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidConfig("distribution entries must be finite and nonnegative".into()));
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidConfig(format!("distribution sums to {sum}")));
        }
        Ok(PredicateDistribution { probs })
    }

    /// Builds a distribution by normalizing nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    pub fn uniform(n: usize) -> Self {
        PredicateDistribution { probs: vec![1.0 / n as f64; n] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `N × d` relation feature matrix, one row per candidate relation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationFeatureBatch {
    features: ndarray::Array2<f64>,
}

impl RelationFeatureBatch {
    pub fn new(features: ndarray::Array2<f64>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidConfig("relation batch needs at least one row".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("relation features must be finite".into()));
        }
        Ok(RelationFeatureBatch { features })
    }

    pub fn features(&self) -> &ndarray::Array2<f64> {
        &self.features
    }

    pub fn into_inner(self) -> ndarray::Array2<f64> {
        self.features
    }
}

pub fn write_jsonl(path: &Path, samples: &[SceneSample]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}", s.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a JSON-lines split. Errors carry file and line.
pub fn read_jsonl(path: &Path, limits: ClassLimits) -> Result<Vec<SceneSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SceneSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let Verdict::Violations(v) = validate_sample_with(&sample, limits) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("sample {} invalid: {}", sample.sample_id, v.join("; ")),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, d: usize) -> FeatureGrid {
        vec![vec![vec![0.25; d]; w]; h]
    }

    fn entity(id: u64, class_id: usize) -> Entity {
        Entity { bbox: BoundingBox::new(0.1, 0.1, 0.4, 0.4), class_id, instance_id: id }
    }

    #[test]
    fn single_entity_without_relations_is_valid() {
        let s = SceneSample { sample_id: 0, feature_grid: grid(2, 2, 3), entities: vec![entity(1, 0)], relations: vec![] };
        assert_eq!(validate_sample(&s), Verdict::Ok);
    }

    #[test]
    fn self_loop_is_reported() {
        let s = SceneSample {
            sample_id: 0,
            feature_grid: grid(2, 2, 3),
            entities: vec![entity(1, 0)],
            relations: vec![RelationTriplet { subject_id: 1, object_id: 1, predicate_id: 2 }],
        };
        let v = validate_sample(&s);
        assert!(v.violations().iter().any(|m| m.contains("self-loop")), "{v:?}");
    }

    #[test]
    fn dangling_reference_is_reported() {
        let s = SceneSample {
            sample_id: 0,
            feature_grid: grid(2, 2, 3),
            entities: vec![entity(1, 0)],
            relations: vec![RelationTriplet { subject_id: 1, object_id: 9, predicate_id: 2 }],
        };
        let v = validate_sample(&s);
        assert!(v.violations().iter().any(|m| m.contains("dangling reference")), "{v:?}");
    }

    #[test]
    fn background_predicate_and_duplicates_are_reported() {
        let s = SceneSample {
            sample_id: 0,
            feature_grid: grid(2, 2, 3),
            entities: vec![entity(1, 0), entity(2, 1)],
            relations: vec![
                RelationTriplet { subject_id: 1, object_id: 2, predicate_id: 0 },
                RelationTriplet { subject_id: 1, object_id: 2, predicate_id: 3 },
            ],
        };
        let v = validate_sample(&s);
        assert_eq!(v.violations().len(), 2, "{v:?}");
    }

    #[test]
    fn box_cells_and_iou() {
        let b = BoundingBox::new(0.25, 0.0, 0.5, 0.25);
        let cells: Vec<_> = b.cells(4, 4).collect();
        assert_eq!(cells, vec![(0, 1)]);
        assert_eq!(b.iou(&b), 1.0);
        let far = BoundingBox::new(0.75, 0.75, 1.0, 1.0);
        assert_eq!(b.iou(&far), 0.0);
        let half = BoundingBox::new(0.25, 0.0, 0.375, 0.25);
        assert!((b.iou(&half) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_encodes_as_bare_array() {
        let e = entity(4, 2);
        let js = serde_json::to_value(&e).unwrap();
        assert_eq!(js["box"], serde_json::json!([0.1, 0.1, 0.4, 0.4]));
        assert_eq!(js["class_id"], 2);
        assert_eq!(js["instance_id"], 4);
    }

    fn arb_sample() -> impl Strategy<Value = SceneSample> {
        (
            any::<u64>(),
            prop::collection::vec(prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2), 2),
            prop::collection::vec((0usize..5, 0.0f64..0.5, 0.0f64..0.5), 1..5),
            prop::collection::vec((0usize..4, 0usize..4, 1usize..8), 0..4),
        )
            .prop_map(|(id, grid, ents, rels)| {
                let entities: Vec<Entity> = ents
                    .iter()
                    .enumerate()
                    .map(|(i, &(c, x, y))| Entity {
                        bbox: BoundingBox::new(x, y, x + 0.25, y + 0.5),
                        class_id: c,
                        instance_id: i as u64 * 3 + 1,
                    })
                    .collect();
                let relations = rels
                    .iter()
                    .map(|&(s, o, p)| RelationTriplet {
                        subject_id: entities[s % entities.len()].instance_id,
                        object_id: entities[o % entities.len()].instance_id,
                        predicate_id: p,
                    })
                    .collect();
                SceneSample { sample_id: id, feature_grid: grid, entities, relations }
            })
    }

    proptest! {
        #[test]
        fn json_round_trip_and_pure_validation(s in arb_sample()) {
            let line = s.to_json_line();
            let back: SceneSample = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(validate_sample(&s), validate_sample(&back));
        }
    }
}
