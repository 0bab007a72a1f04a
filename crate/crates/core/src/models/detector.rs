//! Detector stand-in for the two-stage model.
//!
//! A linear per-cell classifier over the feature grid (object classes plus a
//! background class). Proposals are the 4-connected components of cells that
//! share a predicted object class; each component's cell hull is its box. The
//! classifier is pre-trained once and then frozen.

use rand::seq::SliceRandom;

use crate::autograd::Graph;
use crate::exec::{self, Exec};
use crate::nn::Linear;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::{Mat, ParamGroup, ParamStore};
use crate::rng::{self, stream, Rng};
use crate::types::{BoundingBox, SceneSample};

const MIN_COMPONENT_CELLS: usize = 2;
const BATCH_CELLS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorStub {
    pub classifier: Linear,
    pub num_object_classes: usize,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

impl DetectorStub {
    pub fn new(store: &mut ParamStore, feature_dim: usize, num_object_classes: usize, rng: &mut Rng) -> Self {
        DetectorStub {
            classifier: Linear::new(store, "detector.cell_classifier", ParamGroup::Detector, feature_dim, num_object_classes + 1, rng),
            num_object_classes,
            trained: false,
        }
    }

    fn background(&self) -> usize {
        self.num_object_classes
    }

    /// `H·W × (C_obj + 1)` cell class probabilities, row-major over cells.
    pub fn cell_probs(&self, store: &ParamStore, sample: &SceneSample) -> Mat {
        let x = cell_matrix(sample);
        let mut g = Graph::new(store);
        let x = g.constant(x);
        let logits = self.classifier.forward(&mut g, x);
        let p = g.softmax(logits);
        g.value(p).clone()
    }

    pub fn propose(&self, store: &ParamStore, sample: &SceneSample) -> Vec<Proposal> {
        let (h, w, _) = sample.grid_shape();
        let probs = self.cell_probs(store, sample);
        let labels: Vec<usize> = probs.rows().into_iter().map(|r| super::argmax(r.as_slice().expect("contiguous"))).collect();
        let mut seen = vec![false; h * w];
        let mut out = Vec::new();
        for start in 0..h * w {
            if seen[start] || labels[start] == self.background() {
                continue;
            }
            let class_id = labels[start];
            let mut stack = vec![start];
            seen[start] = true;
            let mut cells = Vec::new();
            while let Some(c) = stack.pop() {
                cells.push(c);
                let (r, col) = (c / w, c % w);
                let mut nbrs = Vec::with_capacity(4);
                if r > 0 {
                    nbrs.push(c - w);
                }
                if r + 1 < h {
                    nbrs.push(c + w);
                }
                if col > 0 {
                    nbrs.push(c - 1);
                }
                if col + 1 < w {
                    nbrs.push(c + 1);
                }
                for n in nbrs {
                    if !seen[n] && labels[n] == class_id {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
            if cells.len() < MIN_COMPONENT_CELLS {
                continue;
            }
            let r0 = cells.iter().map(|c| c / w).min().expect("nonempty");
            let r1 = cells.iter().map(|c| c / w).max().expect("nonempty");
            let c0 = cells.iter().map(|c| c % w).min().expect("nonempty");
            let c1 = cells.iter().map(|c| c % w).max().expect("nonempty");
            let score = cells.iter().map(|&c| probs[[c, class_id]]).sum::<f64>() / cells.len() as f64;
            out.push(Proposal {
                bbox: BoundingBox::new(c0 as f64 / w as f64, r0 as f64 / h as f64, (c1 + 1) as f64 / w as f64, (r1 + 1) as f64 / h as f64),
                class_id,
                score,
            });
        }
        // deterministic order: left to right, then top to bottom
        out.sort_by(|a, b| a.bbox.x_min.total_cmp(&b.bbox.x_min).then(a.bbox.y_min.total_cmp(&b.bbox.y_min)));
        out
    }

    /// Majority cell vote inside a ground-truth box.
    pub fn classify_box(&self, store: &ParamStore, sample: &SceneSample, bbox: &BoundingBox) -> usize {
        let (h, w, _) = sample.grid_shape();
        let probs = self.cell_probs(store, sample);
        let mut votes = vec![0.0; self.num_object_classes];
        for (r, c) in bbox.cells(h, w) {
            let row = probs.row(r * w + c);
            for (k, v) in votes.iter_mut().enumerate() {
                *v += row[k];
            }
        }
        super::argmax(&votes)
    }
}

fn cell_matrix(sample: &SceneSample) -> Mat {
    let (h, w, d) = sample.grid_shape();
    Mat::from_shape_fn((h * w, d), |(i, k)| sample.feature_grid[i / w][i % w][k])
}

fn cell_labels(sample: &SceneSample, background: usize) -> Vec<usize> {
    let (h, w, _) = sample.grid_shape();
    let mut labels = vec![background; h * w];
    for e in &sample.entities {
        for (r, c) in e.bbox.cells(h, w) {
            labels[r * w + c] = e.class_id;
        }
    }
    labels
}

/// Trains the cell classifier by softmax regression and freezes it.
pub fn pretrain_detector_stub(
    stub: &mut DetectorStub,
    store: &mut ParamStore,
    train: &[SceneSample],
    epochs: usize,
    seed: u64,
    exec: Exec,
) {
    let bg = stub.background();
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for (si, s) in train.iter().enumerate() {
        for (ci, _) in cell_labels(s, bg).iter().enumerate() {
            cells.push((si, ci));
        }
    }
    let labels: Vec<Vec<usize>> = exec::map(exec, train, |s| cell_labels(s, bg));
    let d = train.first().map_or(0, |s| s.grid_shape().2);
    let w_grid = train.first().map_or(1, |s| s.grid_shape().1);
    let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.9, weight_decay: 0.0 }, store);
    let mut rng = rng::rng_for(seed, &[stream::DETECTOR]);
    let steps_per_epoch = cells.len().div_ceil(BATCH_CELLS);
    let total = epochs * steps_per_epoch;
    let mut step = 0;
    for _ in 0..epochs {
        cells.shuffle(&mut rng);
        for chunk in cells.chunks(BATCH_CELLS) {
            let x = Mat::from_shape_fn((chunk.len(), d), |(i, k)| {
                let (si, ci) = chunk[i];
                train[si].feature_grid[ci / w_grid][ci % w_grid][k]
            });
            let y: Vec<usize> = chunk.iter().map(|&(si, ci)| labels[si][ci]).collect();
            let grads = {
                let mut g = Graph::new(store);
                let xv = g.constant(x);
                let logits = stub.classifier.forward(&mut g, xv);
                let lp = g.log_softmax(logits);
                let loss = g.nll(lp, &y, &vec![1.0; y.len()], y.len() as f64);
                g.backward(loss)
            };
            let lr = crate::optim::cosine_lr(0.5, step, total);
            opt.step(store, &grads, lr);
            step += 1;
        }
    }
    store.freeze_group(ParamGroup::Detector);
    stub.trained = true;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};

    #[test]
    fn pretrained_stub_finds_entities() {
        let spec = CorpusSpec { n_train: 150, n_val: 40, n_test: 1, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rng::rng_for(0, &[stream::INIT]);
        let mut stub = DetectorStub::new(&mut store, spec.feature_dim, spec.num_object_classes, &mut rng);
        pretrain_detector_stub(&mut stub, &mut store, &corpus.train, 2, 0, Exec::Parallel);
        assert!(stub.trained);
        assert!(store.ids_in(ParamGroup::Detector).iter().all(|&id| store.entry(id).frozen));
        let (mut hit, mut correct, mut total) = (0, 0, 0);
        for s in &corpus.val {
            let props = stub.propose(&store, s);
            for e in &s.entities {
                total += 1;
                if props.iter().any(|p| p.bbox.iou(&e.bbox) > 0.5) {
                    hit += 1;
                }
                if stub.classify_box(&store, s, &e.bbox) == e.class_id {
                    correct += 1;
                }
            }
        }
        assert!(hit as f64 / total as f64 > 0.9, "box hit rate {hit}/{total}");
        assert!(correct as f64 / total as f64 > 0.9, "class accuracy {correct}/{total}");
    }
}
