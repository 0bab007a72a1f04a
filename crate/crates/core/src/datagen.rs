//! Long-tailed synthetic scene-graph corpus.
//!
//! Every sample is generated from its own ChaCha8 stream keyed by
//! `(seed, sample_id)`, so generation shards freely across workers.
//!
//! Layout of a sample:
//! * entity boxes snap to grid cells and keep at least one empty cell between
//!   each other, so distinct ground-truth boxes never overlap;
//! * the first half of the feature channels carries an object-class prototype
//!   inside each entity box;
//! * the second half carries a predicate prototype over the union box of each
//!   ground-truth relation;
//! * Gaussian noise everywhere.
//!
//! Predicates are drawn first from a Zipf law over ids `1..C_pred` (id 1 is the
//! most frequent); subject and object classes are then drawn from
//! predicate-specific preferences so that the class-pair prior carries signal.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::rng::{self, stream, Rng};
use crate::types::{
    self, BoundingBox, ClassLimits, Entity, FeatureGrid, RelationTriplet, SceneSample, BACKGROUND,
};

pub const DEFAULT_PRIOR_EPSILON: f64 = 1e-3;
pub const DEFAULT_HEAD_FRAC: f64 = 0.2;
pub const DEFAULT_BODY_FRAC: f64 = 0.4;

const ENTITY_SIGNAL: f64 = 1.0;
const RELATION_SIGNAL: f64 = 0.8;
const NOISE_STD: f64 = 0.5;
const MIN_SIDE: usize = 2;
const MAX_SIDE: usize = 4;
const SUBJECT_PREFERENCE: f64 = 0.7;
const REUSE_ENTITY_PROB: f64 = 0.3;
const DISTRACTOR_PROB: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub num_object_classes: usize,
    /// Includes the background class at index 0.
    pub num_predicates: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub max_entities: usize,
    pub zipf_s: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            num_object_classes: 10,
            num_predicates: 16,
            height: 16,
            width: 16,
            feature_dim: 32,
            max_entities: 6,
            zipf_s: 1.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidCorpusSpec(m.to_string()));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("sample counts must be at least 1");
        }
        if self.num_predicates < 2 {
            return bad("need at least one predicate besides background");
        }
        if self.num_object_classes == 0 {
            return bad("need at least one object class");
        }
        if !(self.zipf_s >= 0.0 && self.zipf_s.is_finite()) {
            return bad("zipf_s must be finite and nonnegative");
        }
        if self.max_entities < 2 {
            return bad("max_entities < 2 leaves no room for a relation");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        // two boxes of MIN_SIDE with a one-cell gap must fit
        if self.height < MIN_SIDE || self.width < 2 * MIN_SIDE + 1 {
            return bad("grid too small to place two separated entities");
        }
        Ok(())
    }

    pub fn limits(&self) -> ClassLimits {
        ClassLimits {
            num_object_classes: Some(self.num_object_classes),
            num_predicates: Some(self.num_predicates),
        }
    }

    /// SHA-256 of the canonical JSON encoding; ties checkpoints to a corpus.
    pub fn hash(&self) -> String {
        let js = serde_json::to_vec(self).expect("spec serialization cannot fail");
        hex::encode(Sha256::digest(&js))
    }

    fn entity_channels(&self) -> std::ops::Range<usize> {
        0..self.feature_dim / 2
    }

    fn relation_channels(&self) -> std::ops::Range<usize> {
        self.feature_dim / 2..self.feature_dim
    }

    /// Unnormalized Zipf weights indexed by predicate id (background weight 0).
    pub fn zipf_weights(&self) -> Vec<f64> {
        (0..self.num_predicates)
            .map(|k| if k == BACKGROUND { 0.0 } else { (k as f64).powf(-self.zipf_s) })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

/// Shared class/predicate prototypes and predicate→class preferences.
struct Prototypes {
    object: Vec<Vec<f64>>,
    predicate: Vec<Vec<f64>>,
    subject_pref: Vec<usize>,
    object_pref: Vec<usize>,
}

impl Prototypes {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = rng::rng_for(spec.seed, &[stream::PROTOTYPES]);
        let unit = |rng: &mut Rng, n: usize| -> Vec<f64> {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            // scale so per-channel magnitude is O(1)
            v.iter().map(|x| x / norm * (n as f64).sqrt()).collect()
        };
        let ne = spec.entity_channels().len();
        let nr = spec.relation_channels().len();
        let object = (0..spec.num_object_classes).map(|_| unit(&mut rng, ne)).collect();
        let predicate = (0..spec.num_predicates).map(|_| unit(&mut rng, nr)).collect();
        let subject_pref = (0..spec.num_predicates)
            .map(|_| rng.random_range(0..spec.num_object_classes))
            .collect();
        let object_pref = (0..spec.num_predicates)
            .map(|_| rng.random_range(0..spec.num_object_classes))
            .collect();
        Prototypes { object, predicate, subject_pref, object_pref }
    }
}

fn sample_categorical(rng: &mut Rng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("nonempty weights");
    let u = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

/// Places a new box with at least one free cell to every existing box.
fn place_box(rng: &mut Rng, spec: &CorpusSpec, taken: &[(usize, usize, usize, usize)]) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..64 {
        let bw = rng.random_range(MIN_SIDE..=MAX_SIDE.min(spec.width));
        let bh = rng.random_range(MIN_SIDE..=MAX_SIDE.min(spec.height));
        let c0 = rng.random_range(0..=spec.width - bw);
        let r0 = rng.random_range(0..=spec.height - bh);
        if is_clear(taken, r0, c0, bh, bw) {
            return Some((r0, c0, bh, bw));
        }
    }
    // small grids: scan for any free minimal box before giving up
    let (bh, bw) = (MIN_SIDE, MIN_SIDE);
    (0..=spec.height - bh)
        .flat_map(|r0| (0..=spec.width - bw).map(move |c0| (r0, c0, bh, bw)))
        .find(|&(r0, c0, _, _)| is_clear(taken, r0, c0, bh, bw))
}

/// At least one free cell between the candidate and every placed box.
fn is_clear(taken: &[(usize, usize, usize, usize)], r0: usize, c0: usize, bh: usize, bw: usize) -> bool {
    taken.iter().all(|&(tr, tc, th, tw)| c0 + bw < tc || tc + tw < c0 || r0 + bh < tr || tr + th < r0)
}

fn cell_box(spec: &CorpusSpec, (r0, c0, bh, bw): (usize, usize, usize, usize)) -> BoundingBox {
    BoundingBox::new(
        c0 as f64 / spec.width as f64,
        r0 as f64 / spec.height as f64,
        (c0 + bw) as f64 / spec.width as f64,
        (r0 + bh) as f64 / spec.height as f64,
    )
}

fn generate_sample(spec: &CorpusSpec, protos: &Prototypes, zipf_cum: &[f64], sample_id: u64) -> SceneSample {
    let mut rng = rng::rng_for(spec.seed, &[stream::SAMPLE, sample_id]);
    let c_obj = spec.num_object_classes;
    let draw_class = |rng: &mut Rng, preferred: usize| {
        if rng.random::<f64>() < SUBJECT_PREFERENCE {
            preferred
        } else {
            rng.random_range(0..c_obj)
        }
    };

    let mut cells: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut entities: Vec<Entity> = Vec::new();
    let mut relations: Vec<RelationTriplet> = Vec::new();

    let new_entity = |rng: &mut Rng, class_id: usize, cells: &mut Vec<_>, entities: &mut Vec<Entity>| -> Option<usize> {
        if entities.len() >= spec.max_entities {
            return None;
        }
        let placed = place_box(rng, spec, cells)?;
        cells.push(placed);
        entities.push(Entity { bbox: cell_box(spec, placed), class_id, instance_id: entities.len() as u64 });
        Some(entities.len() - 1)
    };

    let n_rel = rng.random_range(1..=(spec.max_entities / 2).max(1));
    for _ in 0..n_rel {
        let predicate = sample_categorical(&mut rng, zipf_cum);
        let s_class = draw_class(&mut rng, protos.subject_pref[predicate]);
        let o_class = draw_class(&mut rng, protos.object_pref[predicate]);

        let reuse = entities.len() >= 1 && rng.random::<f64>() < REUSE_ENTITY_PROB;
        let subject = if reuse {
            let candidates: Vec<usize> = (0..entities.len()).filter(|&i| entities[i].class_id == s_class).collect();
            if candidates.is_empty() {
                new_entity(&mut rng, s_class, &mut cells, &mut entities)
            } else {
                Some(candidates[rng.random_range(0..candidates.len())])
            }
        } else {
            new_entity(&mut rng, s_class, &mut cells, &mut entities)
        };
        let Some(subject) = subject else { break };
        let Some(object) = new_entity(&mut rng, o_class, &mut cells, &mut entities) else { break };
        let (sid, oid) = (entities[subject].instance_id, entities[object].instance_id);
        if relations.iter().any(|r| r.subject_id == sid && r.object_id == oid) {
            continue;
        }
        relations.push(RelationTriplet { subject_id: sid, object_id: oid, predicate_id: predicate });
    }

    // unrelated entities
    while entities.len() < spec.max_entities && rng.random::<f64>() < DISTRACTOR_PROB {
        let class_id = rng.random_range(0..c_obj);
        if new_entity(&mut rng, class_id, &mut cells, &mut entities).is_none() {
            break;
        }
    }

    // degenerate draws (every placement failed, or reuse produced only a
    // duplicate) restart from a corner subject so each scene has a relation
    if relations.is_empty() {
        let predicate = sample_categorical(&mut rng, zipf_cum);
        entities.clear();
        cells.clear();
        cells.push((0, 0, MIN_SIDE, MIN_SIDE));
        let s_class = protos.subject_pref[predicate];
        entities.push(Entity { bbox: cell_box(spec, cells[0]), class_id: s_class, instance_id: 0 });
        let s = 0;
        let o = new_entity(&mut rng, protos.object_pref[predicate], &mut cells, &mut entities).expect("room beside a corner box");
        relations.push(RelationTriplet {
            subject_id: entities[s].instance_id,
            object_id: entities[o].instance_id,
            predicate_id: predicate,
        });
    }

    let mut grid: FeatureGrid = (0..spec.height)
        .map(|_| {
            (0..spec.width)
                .map(|_| {
                    (0..spec.feature_dim)
                        .map(|_| NOISE_STD * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();

    let ech = spec.entity_channels();
    for e in &entities {
        for (r, c) in e.bbox.cells(spec.height, spec.width) {
            for (k, ch) in ech.clone().enumerate() {
                grid[r][c][ch] += ENTITY_SIGNAL * protos.object[e.class_id][k];
            }
        }
    }
    let rch = spec.relation_channels();
    for rel in &relations {
        let sb = entities[rel.subject_id as usize].bbox;
        let ob = entities[rel.object_id as usize].bbox;
        for (r, c) in sb.union(&ob).cells(spec.height, spec.width) {
            for (k, ch) in rch.clone().enumerate() {
                grid[r][c][ch] += RELATION_SIGNAL * protos.predicate[rel.predicate_id][k];
            }
        }
    }

    SceneSample { sample_id, feature_grid: grid, entities, relations }
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    generate_corpus_with(spec, Exec::default())
}

pub fn generate_corpus_with(spec: &CorpusSpec, exec: Exec) -> Result<Corpus> {
    spec.validate()?;
    let protos = Prototypes::new(spec);
    let zipf_cum: Vec<f64> = spec
        .zipf_weights()
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    let total = (spec.n_train + spec.n_val + spec.n_test) as u64;
    let ids: Vec<u64> = (0..total).collect();
    let mut all = exec::map(exec, &ids, |&id| generate_sample(spec, &protos, &zipf_cum, id));
    let test = all.split_off(spec.n_train + spec.n_val);
    let val = all.split_off(spec.n_train);
    Ok(Corpus { train: all, val, test })
}

/// Empirical predicate distribution per ordered (subject class, object class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicatePrior {
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Flattened `[s][o][k]`.
    pub table: Vec<f64>,
}

impl PredicatePrior {
    pub fn row(&self, s: usize, o: usize) -> &[f64] {
        let c = self.num_predicates;
        let start = (s * self.num_object_classes + o) * c;
        &self.table[start..start + c]
    }

    pub fn row_mut(&mut self, s: usize, o: usize) -> &mut [f64] {
        let c = self.num_predicates;
        let start = (s * self.num_object_classes + o) * c;
        &mut self.table[start..start + c]
    }

    pub fn log_row(&self, s: usize, o: usize) -> Vec<f64> {
        self.row(s, o).iter().map(|p| p.ln()).collect()
    }

    pub fn uniform(num_object_classes: usize, num_predicates: usize) -> Self {
        PredicatePrior {
            num_object_classes,
            num_predicates,
            table: vec![1.0 / num_predicates as f64; num_object_classes * num_object_classes * num_predicates],
        }
    }
}

pub fn compute_predicate_prior(
    train: &[SceneSample],
    num_object_classes: usize,
    num_predicates: usize,
    epsilon: f64,
) -> PredicatePrior {
    let (co, cp) = (num_object_classes, num_predicates);
    let mut counts = vec![0.0; co * co * cp];
    let mut marginal = vec![0.0; cp];
    for s in train {
        for r in &s.relations {
            let (Some(si), Some(oi)) = (s.entity_index(r.subject_id), s.entity_index(r.object_id)) else {
                continue;
            };
            let (sc, oc) = (s.entities[si].class_id, s.entities[oi].class_id);
            counts[(sc * co + oc) * cp + r.predicate_id] += 1.0;
            marginal[r.predicate_id] += 1.0;
        }
    }
    let normalize = |v: &[f64]| -> Vec<f64> {
        let z: f64 = v.iter().map(|c| c + epsilon).sum();
        v.iter().map(|c| (c + epsilon) / z).collect()
    };
    let global = if marginal.iter().sum::<f64>() > 0.0 {
        normalize(&marginal)
    } else {
        vec![1.0 / cp as f64; cp]
    };
    let mut table = Vec::with_capacity(counts.len());
    for row in counts.chunks(cp) {
        if row.iter().sum::<f64>() > 0.0 {
            table.extend(normalize(row));
        } else {
            table.extend_from_slice(&global);
        }
    }
    PredicatePrior { num_object_classes, num_predicates, table }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub head: Vec<usize>,
    pub body: Vec<usize>,
    pub tail: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Head,
    Body,
    Tail,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Head, Bucket::Body, Bucket::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Head => "head",
            Bucket::Body => "body",
            Bucket::Tail => "tail",
        }
    }
}

impl PartitionSpec {
    pub fn members(&self, b: Bucket) -> &[usize] {
        match b {
            Bucket::Head => &self.head,
            Bucket::Body => &self.body,
            Bucket::Tail => &self.tail,
        }
    }

    pub fn bucket_of(&self, predicate: usize) -> Option<Bucket> {
        Bucket::ALL.into_iter().find(|&b| self.members(b).contains(&predicate))
    }
}

pub fn predicate_counts(train: &[SceneSample], num_predicates: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_predicates];
    for r in train.iter().flat_map(|s| &s.relations) {
        counts[r.predicate_id] += 1;
    }
    counts
}

/// Splits predicates by descending train frequency; ties go to the smaller id.
pub fn compute_partition(train: &[SceneSample], num_predicates: usize, head_frac: f64, body_frac: f64) -> Result<PartitionSpec> {
    if !(head_frac > 0.0 && head_frac < 1.0 && body_frac > 0.0 && body_frac < 1.0 && head_frac + body_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("bad partition fractions {head_frac}/{body_frac}")));
    }
    let counts = predicate_counts(train, num_predicates);
    let mut ids: Vec<usize> = (1..num_predicates).collect();
    ids.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let n = ids.len();
    let n_head = ((head_frac * n as f64).ceil() as usize).min(n);
    let n_body = ((body_frac * n as f64).ceil() as usize).min(n - n_head);
    let tail = ids.split_off(n_head + n_body);
    let body = ids.split_off(n_head);
    Ok(PartitionSpec { head: ids, body, tail })
}

/// Contents of `meta.json` next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub spec: CorpusSpec,
    pub prior: PredicatePrior,
    pub partition: PartitionSpec,
}

impl CorpusMeta {
    pub fn from_corpus(spec: &CorpusSpec, corpus: &Corpus) -> Result<Self> {
        Ok(CorpusMeta {
            spec: spec.clone(),
            prior: compute_predicate_prior(&corpus.train, spec.num_object_classes, spec.num_predicates, DEFAULT_PRIOR_EPSILON),
            partition: compute_partition(&corpus.train, spec.num_predicates, DEFAULT_HEAD_FRAC, DEFAULT_BODY_FRAC)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Val => "val.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split {s}"))),
        }
    }
}

/// Writes `train/val/test.jsonl` and `meta.json`; returns the written paths.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, corpus: &Corpus) -> Result<(CorpusMeta, Vec<PathBuf>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (split, samples) in [(Split::Train, &corpus.train), (Split::Val, &corpus.val), (Split::Test, &corpus.test)] {
        let path = dir.join(split.file_name());
        types::write_jsonl(&path, samples)?;
        written.push(path);
    }
    let meta = CorpusMeta::from_corpus(spec, corpus)?;
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok((meta, written))
}

pub fn read_meta(dir: &Path) -> Result<CorpusMeta> {
    let path = dir.join("meta.json");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path, line: e.line(), msg: e.to_string() })
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusMeta, Corpus)> {
    let meta = read_meta(dir)?;
    let limits = meta.spec.limits();
    let load = |s: Split| types::read_jsonl(&dir.join(s.file_name()), limits);
    let corpus = Corpus { train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? };
    Ok((meta, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::validate_sample_with;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { n_train: 60, n_val: 10, n_test: 10, ..CorpusSpec::default() }
    }

    fn triplet_sample(id: u64, pairs: &[(usize, usize, usize)]) -> SceneSample {
        let mut entities = Vec::new();
        let mut relations = Vec::new();
        for &(s, o, k) in pairs {
            let sid = entities.len() as u64;
            entities.push(Entity { bbox: BoundingBox::new(0.0, 0.0, 0.1, 0.1), class_id: s, instance_id: sid });
            entities.push(Entity { bbox: BoundingBox::new(0.5, 0.5, 0.6, 0.6), class_id: o, instance_id: sid + 1 });
            relations.push(RelationTriplet { subject_id: sid, object_id: sid + 1, predicate_id: k });
        }
        SceneSample { sample_id: id, feature_grid: vec![vec![vec![0.0]]], entities, relations }
    }

    #[test]
    fn generated_samples_validate_and_keep_boxes_apart() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!((corpus.train.len(), corpus.val.len(), corpus.test.len()), (60, 10, 10));
        for s in corpus.train.iter().chain(&corpus.val) {
            assert!(validate_sample_with(s, spec.limits()).is_ok(), "{:?}", validate_sample_with(s, spec.limits()));
            assert!(!s.relations.is_empty());
            assert!(s.entities.len() <= spec.max_entities);
            for (i, a) in s.entities.iter().enumerate() {
                for b in &s.entities[i + 1..] {
                    assert_eq!(a.bbox.iou(&b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_exec_independent() {
        let spec = small_spec();
        let a = generate_corpus_with(&spec, Exec::Sequential).unwrap();
        let b = generate_corpus_with(&spec, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let enc = |c: &Corpus| c.train.iter().map(|s| s.to_json_line()).collect::<Vec<_>>().join("\n");
        assert_eq!(enc(&a), enc(&b));
        let other = generate_corpus(&CorpusSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train[0], other.train[0]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_corpus(&CorpusSpec { max_entities: 1, ..small_spec() }).is_err());
        assert!(generate_corpus(&CorpusSpec { num_predicates: 1, ..small_spec() }).is_err());
        assert!(generate_corpus(&CorpusSpec { n_val: 0, ..small_spec() }).is_err());
    }

    #[test]
    fn prior_single_observation_is_one_hot() {
        let train = vec![triplet_sample(0, &[(2, 5, 3)])];
        let prior = compute_predicate_prior(&train, 10, 16, 0.0);
        let row = prior.row(2, 5);
        assert_eq!(row[3], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn prior_unobserved_pair_falls_back_to_marginal() {
        let train = vec![triplet_sample(0, &[(2, 5, 3), (4, 4, 1), (2, 5, 3)])];
        let prior = compute_predicate_prior(&train, 10, 16, 0.0);
        let row = prior.row(0, 1);
        assert!((row[3] - 2.0 / 3.0).abs() < 1e-15);
        assert!((row[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn prior_two_observations_split_evenly() {
        let train = vec![triplet_sample(0, &[(1, 2, 1), (1, 2, 2)])];
        let prior = compute_predicate_prior(&train, 3, 6, 0.0);
        assert_eq!(prior.row(1, 2), &[0.0, 0.5, 0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn prior_rows_are_distributions_with_smoothing() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let prior = compute_predicate_prior(&corpus.train, 10, 16, DEFAULT_PRIOR_EPSILON);
        for row in prior.table.chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn partition_sizes_follow_fractions() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let p = compute_partition(&corpus.train, 16, 0.2, 0.4).unwrap();
        assert_eq!((p.head.len(), p.body.len(), p.tail.len()), (3, 6, 6));
        let mut all: Vec<usize> = p.head.iter().chain(&p.body).chain(&p.tail).copied().collect();
        all.sort();
        assert_eq!(all, (1..16).collect::<Vec<_>>());
    }

    #[test]
    fn partition_ties_break_by_ascending_id() {
        let train = vec![triplet_sample(0, &[(0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 0, 4), (0, 0, 5)])];
        let p = compute_partition(&train, 6, 0.2, 0.4).unwrap();
        assert_eq!(p.head, vec![1]);
        assert_eq!(p.body, vec![2, 3]);
        assert_eq!(p.tail, vec![4, 5]);
        assert!(compute_partition(&train, 6, 0.6, 0.4).is_err());
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec { n_train: 8, n_val: 3, n_test: 3, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let (meta, files) = write_corpus(dir.path(), &spec, &corpus).unwrap();
        assert_eq!(files.len(), 4);
        let (meta2, back) = read_corpus(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(back, corpus);
    }

    #[test]
    fn read_reports_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = triplet_sample(0, &[(0, 1, 1)]).to_json_line();
        std::fs::write(&path, format!("{good}\n{{not json}}\n")).unwrap();
        match types::read_jsonl(&path, ClassLimits::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
