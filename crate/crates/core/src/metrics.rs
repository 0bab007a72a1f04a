//! Triplet matching, Recall@K, mean Recall@K and long-tail partition recalls.
//!
//! Conventions: predictions are ranked by descending score with ties kept in
//! input order; a ground-truth triplet is matched at most once and a
//! prediction consumes at most one ground truth; R@K is averaged image-wise;
//! mR@K pools matches per predicate across the whole split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Bucket, PartitionSpec};
use crate::error::{Error, Result};
use crate::models::{EvalMode, ScenePrediction};
use crate::types::{BoundingBox, SceneSample, BACKGROUND};

pub const IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: [usize; 3] = [20, 50, 100];
/// K at which partition recalls are reported.
pub const PARTITION_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletEnd {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictedTriplet {
    pub subject: TripletEnd,
    pub object: TripletEnd,
    pub predicate_id: usize,
    pub score: f64,
}

/// Ground-truth triplet with its resolved entity ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtTriplet {
    pub subject: TripletEnd,
    pub object: TripletEnd,
    pub predicate_id: usize,
}

pub fn gt_triplets(sample: &SceneSample) -> Vec<GtTriplet> {
    sample
        .relations
        .iter()
        .map(|r| {
            let s = &sample.entities[sample.entity_index(r.subject_id).expect("validated sample")];
            let o = &sample.entities[sample.entity_index(r.object_id).expect("validated sample")];
            GtTriplet {
                subject: TripletEnd { class_id: s.class_id, bbox: s.bbox },
                object: TripletEnd { class_id: o.class_id, bbox: o.bbox },
                predicate_id: r.predicate_id,
            }
        })
        .collect()
}

/// Ranked triplets from one scene prediction. With the graph constraint only
/// the top non-background predicate of each ordered pair is kept.
pub fn rank_triplets(pred: &ScenePrediction, graph_constraint: bool) -> Vec<PredictedTriplet> {
    let mut out = Vec::new();
    for pair in &pred.pairs {
        let (s, o) = (&pred.entities[pair.subject], &pred.entities[pair.object]);
        let end = |e: &crate::models::PredEntity| TripletEnd { class_id: e.class_id, bbox: e.bbox };
        let mut push = |k: usize| {
            out.push(PredictedTriplet { subject: end(s), object: end(o), predicate_id: k, score: pair.probs[k] * s.score * o.score });
        };
        if graph_constraint {
            let mut best = None;
            for (k, &p) in pair.probs.iter().enumerate() {
                if k != BACKGROUND && best.is_none_or(|b: usize| p > pair.probs[b]) {
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                push(k);
            }
        } else {
            (0..pair.probs.len()).filter(|&k| k != BACKGROUND).for_each(&mut push);
        }
    }
    // stable: equal scores keep generation order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Whether a prediction may match a ground-truth triplet.
pub fn triplet_matches(p: &PredictedTriplet, g: &GtTriplet, mode: EvalMode, iou_threshold: f64) -> bool {
    p.predicate_id == g.predicate_id
        && p.subject.class_id == g.subject.class_id
        && p.object.class_id == g.object.class_id
        && match mode {
            // boxes are the ground-truth boxes; require the same instances
            EvalMode::PredCls | EvalMode::SgCls => p.subject.bbox == g.subject.bbox && p.object.bbox == g.object.bbox,
            EvalMode::SgDet => p.subject.bbox.iou(&g.subject.bbox) >= iou_threshold && p.object.bbox.iou(&g.object.bbox) >= iou_threshold,
        }
}

/// Greedy scan of the top-`k` predictions; returns matched gt indices (sorted).
pub fn match_triplets(predictions: &[PredictedTriplet], gt: &[GtTriplet], mode: EvalMode, k: i64, iou_threshold: f64) -> Result<Vec<usize>> {
    if k <= 0 {
        return Err(Error::InvalidK(k));
    }
    let mut taken = vec![false; gt.len()];
    for p in predictions.iter().take(k as usize) {
        if let Some(i) = (0..gt.len()).find(|&i| !taken[i] && triplet_matches(p, &gt[i], mode, iou_threshold)) {
            taken[i] = true;
        }
    }
    Ok((0..gt.len()).filter(|&i| taken[i]).collect())
}

/// Per-image outcome at one K: predicate of every gt triplet and whether it
/// was matched.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImageMatches {
    pub gt_predicates: Vec<usize>,
    pub matched: Vec<bool>,
}

impl ImageMatches {
    pub fn new(gt: &[GtTriplet], matched_idx: &[usize]) -> Self {
        let mut matched = vec![false; gt.len()];
        for &i in matched_idx {
            matched[i] = true;
        }
        ImageMatches { gt_predicates: gt.iter().map(|g| g.predicate_id).collect(), matched }
    }
}

pub fn recall_at_k(images: &[ImageMatches]) -> f64 {
    let per_image: Vec<f64> = images
        .iter()
        .filter(|m| !m.gt_predicates.is_empty())
        .map(|m| m.matched.iter().filter(|&&b| b).count() as f64 / m.gt_predicates.len() as f64)
        .collect();
    if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

/// Pooled recall of each predicate; `None` for predicates without ground truth.
pub fn per_predicate_recall(images: &[ImageMatches], num_predicates: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; num_predicates];
    let mut total = vec![0usize; num_predicates];
    for m in images {
        for (&p, &ok) in m.gt_predicates.iter().zip(&m.matched) {
            total[p] += 1;
            hit[p] += ok as usize;
        }
    }
    (0..num_predicates).map(|p| (total[p] > 0).then(|| hit[p] as f64 / total[p] as f64)).collect()
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn mean_recall_at_k(images: &[ImageMatches], num_predicates: usize) -> f64 {
    mean_of(per_predicate_recall(images, num_predicates).into_iter().flatten())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionRecall {
    pub head: f64,
    pub body: f64,
    pub tail: f64,
}

pub fn partition_recall(per_predicate: &[Option<f64>], partition: &PartitionSpec) -> PartitionRecall {
    let bucket = |ids: &[usize]| mean_of(ids.iter().filter_map(|&p| per_predicate.get(p).copied().flatten()));
    PartitionRecall { head: bucket(&partition.head), body: bucket(&partition.body), tail: bucket(&partition.tail) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_recall_at: BTreeMap<usize, f64>,
    /// Per-predicate recall at each K; background and unseen predicates absent.
    pub per_predicate_recall: BTreeMap<usize, BTreeMap<usize, f64>>,
    /// At [`PARTITION_K`] (or the largest requested K if 100 was not requested).
    pub partition_recall: PartitionRecall,
    pub num_images: usize,
}

impl EvalReport {
    /// Builds the report from per-image matches at every K.
    pub fn from_matches(mode: EvalMode, per_k: &BTreeMap<usize, Vec<ImageMatches>>, num_predicates: usize, partition: &PartitionSpec) -> Self {
        let mut recall_at = BTreeMap::new();
        let mut mean_recall_at = BTreeMap::new();
        let mut per_predicate = BTreeMap::new();
        for (&k, images) in per_k {
            recall_at.insert(k, recall_at_k(images));
            mean_recall_at.insert(k, mean_recall_at_k(images, num_predicates));
            let pp = per_predicate_recall_map(images, num_predicates);
            per_predicate.insert(k, pp);
        }
        let pk = if per_k.contains_key(&PARTITION_K) { PARTITION_K } else { per_k.keys().next_back().copied().unwrap_or(PARTITION_K) };
        let partition_recall = per_k
            .get(&pk)
            .map(|images| partition_recall(&per_predicate_recall(images, num_predicates), partition))
            .unwrap_or_default();
        let num_images = per_k.values().next().map_or(0, |v| v.len());
        EvalReport { mode, recall_at, mean_recall_at, per_predicate_recall: per_predicate, partition_recall, num_images }
    }

    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.mean_recall_at.get(&k).copied()
    }

    /// Rows `metric,mode,K,value`.
    pub fn csv_rows(&self) -> Vec<(String, String, usize, f64)> {
        let m = self.mode.name().to_string();
        let mut rows = Vec::new();
        for (&k, &v) in &self.recall_at {
            rows.push(("R".into(), m.clone(), k, v));
        }
        for (&k, &v) in &self.mean_recall_at {
            rows.push(("mR".into(), m.clone(), k, v));
        }
        let pk = if self.recall_at.contains_key(&PARTITION_K) { PARTITION_K } else { self.recall_at.keys().next_back().copied().unwrap_or(PARTITION_K) };
        rows.push(("head_mR".into(), m.clone(), pk, self.partition_recall.head));
        rows.push(("body_mR".into(), m.clone(), pk, self.partition_recall.body));
        rows.push(("tail_mR".into(), m, pk, self.partition_recall.tail));
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        w.write_record(["metric", "mode", "K", "value"])?;
        for (metric, mode, k, v) in self.csv_rows() {
            w.write_record([metric, mode, k.to_string(), format!("{v:.6}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// `predicate_id,partition,K,recall` for every seen predicate.
    pub fn write_per_predicate_csv(&self, path: &Path, partition: &PartitionSpec) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        w.write_record(["predicate_id", "partition", "K", "recall"])?;
        for (&k, pp) in &self.per_predicate_recall {
            for (&p, &r) in pp {
                let bucket = partition.bucket_of(p).map_or("none", Bucket::name);
                w.write_record([p.to_string(), bucket.to_string(), k.to_string(), format!("{r:.6}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn per_predicate_recall_map(images: &[ImageMatches], num_predicates: usize) -> BTreeMap<usize, f64> {
    per_predicate_recall(images, num_predicates)
        .into_iter()
        .enumerate()
        .filter(|&(p, _)| p != BACKGROUND)
        .filter_map(|(p, r)| r.map(|r| (p, r)))
        .collect()
}

/// Exhaustive reference: the largest number of gt triplets that can be
/// matched one-to-one by the top-`k` predictions, found by trying every
/// assignment. Exponential; for micro-scenes only.
pub fn brute_force_matched_count(predictions: &[PredictedTriplet], gt: &[GtTriplet], mode: EvalMode, k: usize, iou_threshold: f64) -> usize {
    let top = &predictions[..k.min(predictions.len())];
    fn best(pi: usize, top: &[PredictedTriplet], gt: &[GtTriplet], used: &mut Vec<bool>, mode: EvalMode, thr: f64) -> usize {
        if pi == top.len() {
            return 0;
        }
        let mut b = best(pi + 1, top, gt, used, mode, thr);
        for gi in 0..gt.len() {
            if !used[gi] && triplet_matches(&top[pi], &gt[gi], mode, thr) {
                used[gi] = true;
                b = b.max(1 + best(pi + 1, top, gt, used, mode, thr));
                used[gi] = false;
            }
        }
        b
    }
    best(0, top, gt, &mut vec![false; gt.len()], mode, iou_threshold)
}
