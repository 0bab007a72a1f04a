//! Recurrent-context relation model with a frequency prior.
//!
//! Original branch, per scene:
//!
//! ```text
//! entity feats ─ embed ─ object_context (BiLSTM) ─┬─ object classifier
//!                                                 └─ ++ label embedding = edge input
//! edge input ─ edge_context (BiLSTM) ─ e
//! union feats ─ embed ─ u                         (one row per ordered pair)
//! logits(i→j) = compress(post_s(e_i) ⊙ post_o(e_j) ⊙ u_ij) + ln prior[c_i][c_j]
//! ```
//!
//! The mirrored branch zeroes random rows of the (detached) edge input and of
//! the (detached) pair features, reruns the shared `edge_context`, and scores
//! pairs with an untied three-layer ReLU MLP over `[e_i, e_j, u_ij]`. The
//! prior is never added on the untied path.

use std::sync::atomic::AtomicUsize;

use serde::{Deserialize, Serialize};

use crate::align::{build_untied_head, kl_alignment_term, AlignTarget, HeadMode, MirrorHead, TargetMode};
use crate::autograd::{Graph, Var};
use crate::datagen::PredicatePrior;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::masking::draw_row_mask;
use crate::models::detector::{pretrain_detector_stub, DetectorStub};
use crate::models::{argmax, bump, combine_in_graph, EvalMode, LossVars, ModelFamily, PairPrediction, PredEntity, SceneGraphModel, ScenePrediction, StepCtx};
use crate::nn::{BiLstm, Linear};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::rng::{self, stream, Rng};
use crate::types::{BoundingBox, SceneSample, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifsDims {
    pub feature_dim: usize,
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Width of each bidirectional context output (split across directions).
    pub hidden: usize,
    pub label_embed: usize,
    pub mlp_hidden: usize,
}

impl MotifsDims {
    pub fn desk(feature_dim: usize, num_object_classes: usize, num_predicates: usize) -> Self {
        MotifsDims { feature_dim, num_object_classes, num_predicates, hidden: 64, label_embed: 32, mlp_hidden: 64 }
    }

    /// Fewer than a thousand parameters, for finite-difference checks.
    pub fn micro(feature_dim: usize, num_object_classes: usize, num_predicates: usize) -> Self {
        MotifsDims { feature_dim, num_object_classes, num_predicates, hidden: 4, label_embed: 2, mlp_hidden: 4 }
    }
}

pub struct MiniMotifs {
    pub dims: MotifsDims,
    store: ParamStore,
    prior: PredicatePrior,
    pub head_mode: HeadMode,
    entity_embed: Linear,
    object_context: BiLstm,
    object_classifier: Linear,
    label_embedding: ParamId,
    union_embed: Linear,
    edge_context: BiLstm,
    post_subject: Linear,
    post_object: Linear,
    rel_compress: Linear,
    mirror_head: MirrorHead,
    pub detector: DetectorStub,
}

/// Constant per-scene inputs.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub boxes: Vec<BoundingBox>,
    pub entity_feats: Mat,
    /// Left-to-right visiting order of entities.
    pub order: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub union_feats: Mat,
}

impl SceneInputs {
    pub fn new(sample: &SceneSample, boxes: Vec<BoundingBox>) -> Self {
        let d = sample.grid_shape().2;
        let n = boxes.len();
        let mut entity_feats = Mat::zeros((n, d + 4));
        for (i, b) in boxes.iter().enumerate() {
            let pooled = sample.pool(b);
            let mut row = entity_feats.row_mut(i);
            for (k, v) in pooled.into_iter().chain(b.to_array()).enumerate() {
                row[k] = v;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let ca = boxes[a].x_min + boxes[a].x_max;
            let cb = boxes[b].x_min + boxes[b].x_max;
            ca.total_cmp(&cb).then(a.cmp(&b))
        });
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        let mut union_feats = Mat::zeros((pairs.len(), d + 8));
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let pooled = sample.pool(&boxes[i].union(&boxes[j]));
            let mut row = union_feats.row_mut(p);
            for (k, v) in pooled.into_iter().chain(boxes[i].to_array()).chain(boxes[j].to_array()).enumerate() {
                row[k] = v;
            }
        }
        SceneInputs { boxes, entity_feats, order, pairs, union_feats }
    }

    pub fn from_ground_truth(sample: &SceneSample) -> Self {
        Self::new(sample, sample.entities.iter().map(|e| e.bbox).collect())
    }

    /// Ground-truth predicate per pair (background when unrelated).
    pub fn pair_labels(&self, sample: &SceneSample) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|&(i, j)| {
                let (si, oi) = (sample.entities[i].instance_id, sample.entities[j].instance_id);
                sample
                    .relations
                    .iter()
                    .find(|r| r.subject_id == si && r.object_id == oi)
                    .map_or(BACKGROUND, |r| r.predicate_id)
            })
            .collect()
    }
}

/// Nodes produced by the shared backbone.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOut {
    pub obj_logits: Var,
    pub edge_input: Var,
    pub rel_feat: Var,
}

/// Nodes of one relation branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOut {
    pub edge_ctx: Var,
    /// `[e_i, e_j, u_ij]` per pair, the input of the projection.
    pub pre_head: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Value-level branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MotifsOutput {
    pub pairs: Vec<(usize, usize)>,
    pub pair_probs: Mat,
    pub pre_head: Mat,
    pub object_probs: Option<Mat>,
}

impl MiniMotifs {
    pub fn new(dims: MotifsDims, prior: PredicatePrior, head_mode: HeadMode, seed: u64) -> Self {
        assert_eq!(prior.num_predicates, dims.num_predicates);
        assert_eq!(prior.num_object_classes, dims.num_object_classes);
        let mut rng = rng::rng_for(seed, &[stream::INIT]);
        let mut store = ParamStore::new();
        let d = dims;
        let h = d.hidden;
        let detector = DetectorStub::new(&mut store, d.feature_dim, d.num_object_classes, &mut rng);
        let bb = ParamGroup::Backbone;
        let entity_embed = Linear::new(&mut store, "entity_embed", bb, d.feature_dim + 4, h, &mut rng);
        let object_context = BiLstm::new(&mut store, "object_context", bb, h, h, &mut rng);
        let object_classifier = Linear::new(&mut store, "object_classifier", bb, h, d.num_object_classes, &mut rng);
        let label_embedding = store.add_normal("label_embedding", bb, d.num_object_classes, d.label_embed, 0.5, &mut rng);
        let union_embed = Linear::new(&mut store, "union_embed", bb, d.feature_dim + 8, h, &mut rng);
        let rp = ParamGroup::RelationPredictor;
        let edge_context = BiLstm::new(&mut store, "edge_context", rp, h + d.label_embed, h, &mut rng);
        let oh = ParamGroup::OriginalHead;
        let post_subject = Linear::new(&mut store, "post_subject", oh, h, h, &mut rng);
        let post_object = Linear::new(&mut store, "post_object", oh, h, h, &mut rng);
        let rel_compress = Linear::new(&mut store, "rel_compress", oh, h, d.num_predicates, &mut rng);
        let mirror_head = build_untied_head(&mut store, "mirror_mlp", &[3 * h, d.mlp_hidden, d.mlp_hidden, d.num_predicates], head_mode, &mut rng);
        MiniMotifs {
            dims,
            store,
            prior,
            head_mode,
            entity_embed,
            object_context,
            object_classifier,
            label_embedding,
            union_embed,
            edge_context,
            post_subject,
            post_object,
            rel_compress,
            mirror_head,
            detector,
        }
    }

    pub fn prior(&self) -> &PredicatePrior {
        &self.prior
    }

    pub fn set_prior(&mut self, prior: PredicatePrior) {
        assert_eq!(prior.table.len(), self.prior.table.len());
        self.prior = prior;
    }

    pub fn mirror_head(&self) -> &MirrorHead {
        &self.mirror_head
    }

    pub fn original_head_ids(&self) -> Vec<ParamId> {
        [&self.post_subject, &self.post_object, &self.rel_compress].iter().flat_map(|l| l.ids()).collect()
    }

    pub fn pretrain_detector(&mut self, train: &[SceneSample], epochs: usize, seed: u64, exec: Exec) {
        pretrain_detector_stub(&mut self.detector, &mut self.store, train, epochs, seed, exec);
    }

    fn log_prior_rows(&self, inp: &SceneInputs, labels: &[usize]) -> Mat {
        let c = self.dims.num_predicates;
        let mut m = Mat::zeros((inp.pairs.len(), c));
        for (p, &(i, j)) in inp.pairs.iter().enumerate() {
            for (k, v) in self.prior.row(labels[i], labels[j]).iter().enumerate() {
                m[[p, k]] = v.ln();
            }
        }
        m
    }

    /// Object context and edge input. `labels` given → used for the label
    /// embedding; `None` → predicted labels (argmax of the object classifier).
    pub fn backbone<'s>(&'s self, g: &mut Graph<'s>, inp: &SceneInputs, labels: Option<&[usize]>) -> (BackboneOut, Vec<usize>) {
        let x = g.constant(inp.entity_feats.clone());
        let x = self.entity_embed.forward(g, x);
        let x = g.relu(x);
        let oc = self.object_context.forward(g, x, &inp.order);
        let obj_logits = self.object_classifier.forward(g, oc);
        let labels: Vec<usize> = match labels {
            Some(l) => l.to_vec(),
            None => g.value(obj_logits).rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect(),
        };
        let table = g.param(self.label_embedding);
        let emb = g.gather_rows(table, &labels);
        let edge_input = g.concat_cols(&[oc, emb]);
        let u = g.constant(inp.union_feats.clone());
        let u = self.union_embed.forward(g, u);
        let rel_feat = g.relu(u);
        (BackboneOut { obj_logits, edge_input, rel_feat }, labels)
    }

    fn pair_stack(&self, g: &mut Graph, e: Var, pairs: &[(usize, usize)]) -> (Var, Var) {
        let si: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let oi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        (g.gather_rows(e, &si), g.gather_rows(e, &oi))
    }

    fn original_projection(&self, g: &mut Graph, es: Var, eo: Var, u: Var, log_prior: Mat) -> Var {
        let s = self.post_subject.forward(g, es);
        let o = self.post_object.forward(g, eo);
        let h = g.mul(s, o);
        let h = g.mul(h, u);
        let logits = self.rel_compress.forward(g, h);
        g.add_const(logits, &log_prior)
    }

    pub fn original_branch<'s>(&'s self, g: &mut Graph<'s>, inp: &SceneInputs, bb: &BackboneOut, labels: &[usize]) -> BranchOut {
        let edge_ctx = self.edge_context.forward(g, bb.edge_input, &inp.order);
        let (es, eo) = self.pair_stack(g, edge_ctx, &inp.pairs);
        let pre_head = g.concat_cols(&[es, eo, bb.rel_feat]);
        let logits = self.original_projection(g, es, eo, bb.rel_feat, self.log_prior_rows(inp, labels));
        let probs = g.softmax(logits);
        BranchOut { edge_ctx, pre_head, logits, probs }
    }

    /// Mirrored branch on detached, row-masked inputs.
    pub fn mirrored_branch<'s>(
        &'s self,
        g: &mut Graph<'s>,
        inp: &SceneInputs,
        bb: &BackboneOut,
        labels: &[usize],
        p: f64,
        rng: &mut Rng,
        counter: &AtomicUsize,
    ) -> BranchOut {
        bump(counter);
        let mask_rows = |g: &mut Graph<'s>, v: Var, rng: &mut Rng| {
            let d = g.detach(v);
            let (n, w) = g.shape(d);
            let mask = draw_row_mask(n, p, rng);
            if mask.iter().any(|&m| m) {
                let keep = Mat::from_shape_fn((n, w), |(i, _)| if mask[i] { 0.0 } else { 1.0 });
                g.mul_const(d, keep)
            } else {
                d
            }
        };
        let edge_in = mask_rows(g, bb.edge_input, rng);
        let u = mask_rows(g, bb.rel_feat, rng);
        let edge_ctx = self.edge_context.forward(g, edge_in, &inp.order);
        let (es, eo) = self.pair_stack(g, edge_ctx, &inp.pairs);
        let pre_head = g.concat_cols(&[es, eo, u]);
        let logits = match &self.mirror_head {
            MirrorHead::Untied(head) => head.forward(g, pre_head),
            MirrorHead::Tied => self.original_projection(g, es, eo, u, self.log_prior_rows(inp, labels)),
        };
        let probs = g.softmax(logits);
        BranchOut { edge_ctx, pre_head, logits, probs }
    }

    fn inputs_for(&self, sample: &SceneSample, mode: EvalMode) -> Result<(SceneInputs, Option<Vec<usize>>, Vec<f64>)> {
        match mode {
            EvalMode::PredCls => {
                let inp = SceneInputs::from_ground_truth(sample);
                let labels = sample.entities.iter().map(|e| e.class_id).collect();
                Ok((inp, Some(labels), vec![1.0; sample.entities.len()]))
            }
            EvalMode::SgCls => Ok((SceneInputs::from_ground_truth(sample), None, vec![1.0; sample.entities.len()])),
            EvalMode::SgDet => {
                if !self.detector.trained {
                    return Err(Error::DetectorNotTrained);
                }
                let props = self.detector.propose(&self.store, sample);
                let scores = props.iter().map(|p| p.score).collect();
                Ok((SceneInputs::new(sample, props.into_iter().map(|p| p.bbox).collect()), None, scores))
            }
        }
    }

    /// Original-branch forward returning values.
    pub fn forward_original(&self, sample: &SceneSample, mode: EvalMode) -> Result<MotifsOutput> {
        let (inp, labels, _) = self.inputs_for(sample, mode)?;
        if inp.boxes.is_empty() {
            return Ok(MotifsOutput { pairs: vec![], pair_probs: Mat::zeros((0, self.dims.num_predicates)), pre_head: Mat::zeros((0, 3 * self.dims.hidden)), object_probs: None });
        }
        let mut g = Graph::new(&self.store);
        let (bb, labels) = self.backbone(&mut g, &inp, labels.as_deref());
        let out = self.original_branch(&mut g, &inp, &bb, &labels);
        let object_probs = (mode != EvalMode::PredCls).then(|| {
            let p = g.softmax(bb.obj_logits);
            g.value(p).clone()
        });
        Ok(MotifsOutput { pairs: inp.pairs, pair_probs: g.value(out.probs).clone(), pre_head: g.value(out.pre_head).clone(), object_probs })
    }

    /// Mirrored-branch forward (ground-truth boxes and labels) returning values.
    pub fn forward_mirrored(&self, sample: &SceneSample, p: f64, rng: &mut Rng, counter: &AtomicUsize) -> MotifsOutput {
        let inp = SceneInputs::from_ground_truth(sample);
        let labels: Vec<usize> = sample.entities.iter().map(|e| e.class_id).collect();
        let mut g = Graph::new(&self.store);
        let (bb, labels) = self.backbone(&mut g, &inp, Some(&labels));
        let out = self.mirrored_branch(&mut g, &inp, &bb, &labels, p, rng, counter);
        MotifsOutput { pairs: inp.pairs, pair_probs: g.value(out.probs).clone(), pre_head: g.value(out.pre_head).clone(), object_probs: None }
    }

    /// Alignment target on ground-truth inputs: the original branch, detached.
    pub fn alignment_target(&self, sample: &SceneSample) -> AlignTarget {
        let out = self.forward_original(sample, EvalMode::PredCls).expect("predcls needs no detector");
        AlignTarget::relation_only(out.pair_probs)
    }
}

impl SceneGraphModel for MiniMotifs {
    fn family(&self) -> ModelFamily {
        ModelFamily::MiniMotifs
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn supports(&self, _mode: EvalMode) -> bool {
        true
    }

    fn predict(&self, sample: &SceneSample, mode: EvalMode) -> Result<ScenePrediction> {
        let (inp, gt_labels, det_scores) = self.inputs_for(sample, mode)?;
        let out = self.forward_original(sample, mode)?;
        let labels: Vec<usize>;
        let scores: Vec<f64>;
        match (&gt_labels, &out.object_probs) {
            (Some(l), _) => {
                labels = l.clone();
                scores = det_scores;
            }
            (None, Some(op)) => {
                labels = op.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect();
                scores = op.rows().into_iter().zip(&labels).zip(&det_scores).map(|((r, &l), &s)| r[l] * s).collect();
            }
            (None, None) => {
                labels = Vec::new();
                scores = Vec::new();
            }
        }
        let entities = inp
            .boxes
            .iter()
            .zip(labels.iter().zip(&scores))
            .map(|(b, (&class_id, &score))| PredEntity { class_id, bbox: *b, score })
            .collect();
        let pairs = out
            .pairs
            .iter()
            .zip(out.pair_probs.rows())
            .map(|(&(subject, object), probs)| PairPrediction { subject, object, probs: probs.to_vec() })
            .collect();
        Ok(ScenePrediction { entities, pairs })
    }

    fn sample_loss<'s>(&'s self, g: &mut Graph<'s>, sample: &SceneSample, ctx: &mut StepCtx, counter: &AtomicUsize) -> Result<LossVars> {
        let inp = SceneInputs::from_ground_truth(sample);
        let gt: Vec<usize> = sample.entities.iter().map(|e| e.class_id).collect();
        let (bb, labels) = self.backbone(g, &inp, Some(&gt));
        let out = self.original_branch(g, &inp, &bb, &labels);
        let targets = inp.pair_labels(sample);
        let n_pairs = targets.len();
        let ones = vec![1.0; n_pairs];

        let lp = g.log_softmax(out.logits);
        let mut original = g.nll(lp, &targets, &ones, n_pairs.max(1) as f64);
        if ctx.mode != EvalMode::PredCls {
            let olp = g.log_softmax(bb.obj_logits);
            let obj = g.nll(olp, &gt, &vec![1.0; gt.len()], gt.len() as f64);
            original = g.add(original, obj);
        }

        let align = match ctx.align.target_mode {
            TargetMode::Off => None,
            mode => {
                let t = g.detach(out.probs);
                let target = g.value(t).clone();
                let mirror = self.mirrored_branch(g, &inp, &bb, &labels, ctx.align.p, ctx.mask_rng, counter);
                Some(match mode {
                    TargetMode::SelfSupervised => kl_alignment_term(g, &target, mirror.probs),
                    _ => {
                        let mlp = g.log_softmax(mirror.logits);
                        g.nll(mlp, &targets, &ones, n_pairs.max(1) as f64)
                    }
                })
            }
        };
        Ok(combine_in_graph(g, original, align, &ctx.align))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignConfig;
    use crate::datagen::{compute_predicate_prior, generate_corpus, CorpusSpec};
    use crate::rng::rng_for;

    fn setup(head: HeadMode) -> (MiniMotifs, Vec<SceneSample>) {
        let spec = CorpusSpec { n_train: 20, n_val: 2, n_test: 2, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let prior = compute_predicate_prior(&corpus.train, 10, 16, 1e-3);
        (MiniMotifs::new(MotifsDims::desk(32, 10, 16), prior, head, 3), corpus.train)
    }

    #[test]
    fn predcls_scores_every_ordered_pair() {
        let (m, data) = setup(HeadMode::Untied);
        for s in &data {
            let n = s.entities.len();
            let out = m.forward_original(s, EvalMode::PredCls).unwrap();
            assert_eq!(out.pairs.len(), n * (n - 1));
            for row in out.pair_probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zeroed_relation_head_reproduces_the_prior() {
        let (mut m, data) = setup(HeadMode::Untied);
        let ids = m.original_head_ids();
        for id in ids {
            m.store_mut().get_mut(id).fill(0.0);
        }
        let s = &data[0];
        let out = m.forward_original(s, EvalMode::PredCls).unwrap();
        for (p, &(i, j)) in out.pairs.iter().enumerate() {
            let row = m.prior().row(s.entities[i].class_id, s.entities[j].class_id);
            for (a, b) in out.pair_probs.row(p).iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p_zero_mirror_matches_original_pre_head() {
        let (m, data) = setup(HeadMode::Untied);
        let counter = AtomicUsize::new(0);
        for s in &data {
            let orig = m.forward_original(s, EvalMode::PredCls).unwrap();
            let mut rng = rng_for(1, &[]);
            let mir = m.forward_mirrored(s, 0.0, &mut rng, &counter);
            assert_eq!(orig.pre_head, mir.pre_head);
        }
    }

    #[test]
    fn p_one_mirror_is_still_valid() {
        let (m, data) = setup(HeadMode::Untied);
        let counter = AtomicUsize::new(0);
        let mut rng = rng_for(2, &[]);
        let mir = m.forward_mirrored(&data[0], 1.0, &mut rng, &counter);
        let h = m.dims.hidden;
        assert!(mir.pre_head.columns().into_iter().skip(2 * h).all(|c| c.iter().all(|&v| v == 0.0)));
        for row in mir.pair_probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9 && row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn prior_perturbation_only_moves_the_original_branch() {
        let (mut m, data) = setup(HeadMode::Untied);
        let counter = AtomicUsize::new(0);
        let s = &data[0];
        let before_o = m.forward_original(s, EvalMode::PredCls).unwrap();
        let before_m = m.forward_mirrored(s, 0.1, &mut rng_for(5, &[]), &counter);
        let mut prior = m.prior().clone();
        for (i, v) in prior.table.iter_mut().enumerate() {
            *v *= 1.0 + 0.5 * ((i % 7) as f64);
        }
        for row in prior.table.chunks_mut(16) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        m.set_prior(prior);
        let after_o = m.forward_original(s, EvalMode::PredCls).unwrap();
        let after_m = m.forward_mirrored(s, 0.1, &mut rng_for(5, &[]), &counter);
        assert_ne!(before_o.pair_probs, after_o.pair_probs);
        assert_eq!(before_m.pair_probs, after_m.pair_probs);
    }

    #[test]
    fn sgdet_without_detector_is_rejected() {
        let (m, data) = setup(HeadMode::Untied);
        assert!(matches!(m.predict(&data[0], EvalMode::SgDet), Err(Error::DetectorNotTrained)));
    }

    #[test]
    fn tied_mode_has_no_untied_parameters() {
        let (m, _) = setup(HeadMode::Tied);
        assert!(m.store().ids_in(ParamGroup::UntiedHead).is_empty());
        let (m, _) = setup(HeadMode::Untied);
        assert_eq!(m.store().ids_in(ParamGroup::UntiedHead).len(), 6);
    }

    #[test]
    fn alignment_loss_is_zero_with_tied_head_at_p_zero() {
        let (m, data) = setup(HeadMode::Tied);
        let counter = AtomicUsize::new(0);
        let align = AlignConfig { p: 0.0, lambda: 10.0, ..AlignConfig::default() };
        let mut d = rng_for(0, &[1]);
        let mut k = rng_for(0, &[2]);
        let mut ctx = StepCtx { align, mode: EvalMode::PredCls, dropout_rng: &mut d, mask_rng: &mut k };
        let mut g = Graph::new(m.store());
        let l = m.sample_loss(&mut g, &data[0], &mut ctx, &counter).unwrap();
        assert!(g.scalar(l.align.unwrap()) < 1e-9);
        assert_eq!(counter.into_inner(), 1);
    }
}
