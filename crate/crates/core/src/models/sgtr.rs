//! One-stage transformer relation model.
//!
//! ```text
//! grid ─ patchify+embed ─ self-attn block ─ F                  (image tokens)
//! entity queries ─ cross(F) ─ FFN ─ E ─ class / box heads      (entities)
//! predicate queries ─ L × [self-attn, cross(F), cross(E), FFN]
//!                     └ after every layer: rel / subject / object / box heads
//! ```
//!
//! Boxes are reference-point style rather than free regressions: an entity's
//! centre is an attention-weighted mean of token centres plus an offset of at
//! most one token, and a predicate query's subject/object boxes are pointers
//! (softmax over entities) into the decoded entity boxes. Free sigmoid
//! regression did not localise anything at desk-scale budgets.
//!
//! The mirrored branch reruns the predicate decoder on detached `F` and `E`
//! with dropout off, drawing an independent entry mask for every
//! cross-attention block of every layer. Its untied heads (one linear layer
//! each for relation, subject and object labels) are applied at the last
//! layer only, and the alignment loss is the sum of the three KL terms.

use std::sync::atomic::AtomicUsize;

use serde::{Deserialize, Serialize};

use crate::align::{build_untied_head, kl_alignment_term, AlignTarget, HeadMode, MirrorHead, TargetMode};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::draw_entry_mask;
use crate::models::{argmax, box_cxcywh, box_from_cxcywh, bump, combine_in_graph, greedy_assign, EvalMode, LossVars, ModelFamily, PairPrediction, PredEntity, SceneGraphModel, ScenePrediction, StepCtx};
use crate::nn::{residual_norm, Attention, Dropout, FeedForward, Linear};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::rng::{self, stream, Rng};
use crate::types::{SceneSample, BACKGROUND};

/// Weight of the background class for unmatched queries.
const NO_MATCH_WEIGHT: f64 = 0.2;
const BOX_LOSS_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgtrDims {
    pub grid_h: usize,
    pub grid_w: usize,
    pub feature_dim: usize,
    pub num_object_classes: usize,
    pub num_predicates: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub num_rel_queries: usize,
    pub num_ent_queries: usize,
    pub dropout: f64,
}

impl SgtrDims {
    pub fn desk(grid: (usize, usize, usize), num_object_classes: usize, num_predicates: usize) -> Self {
        SgtrDims {
            grid_h: grid.0,
            grid_w: grid.1,
            feature_dim: grid.2,
            num_object_classes,
            num_predicates,
            patch: 2,
            d_model: 64,
            heads: 4,
            ffn: 128,
            layers: 3,
            num_rel_queries: 20,
            num_ent_queries: 10,
            dropout: 0.1,
        }
    }

    /// Fewer than a thousand parameters, for finite-difference checks.
    pub fn micro(grid: (usize, usize, usize), num_object_classes: usize, num_predicates: usize) -> Self {
        SgtrDims { patch: 2, d_model: 4, heads: 2, ffn: 1, layers: 2, num_rel_queries: 3, num_ent_queries: 3, ..Self::desk(grid, num_object_classes, num_predicates) }
    }

    pub fn tokens(&self) -> usize {
        self.grid_h.div_ceil(self.patch) * self.grid_w.div_ceil(self.patch)
    }
}

/// Which decoder layers the alignment loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignLayers {
    #[default]
    LastOnly,
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DecoderLayer {
    self_attn: Attention,
    cross_img: Attention,
    cross_ent: Attention,
    ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct UntiedHeads {
    rel: MirrorHead,
    sub: MirrorHead,
    obj: MirrorHead,
}

pub struct MiniSgtr {
    pub dims: SgtrDims,
    pub head_mode: HeadMode,
    pub align_layers: AlignLayers,
    store: ParamStore,
    patch_embed: Linear,
    pos_embed: ParamId,
    enc_attn: Attention,
    enc_ffn: FeedForward,
    ent_queries: ParamId,
    ent_cross: Attention,
    ent_ffn: FeedForward,
    ent_class: Linear,
    ent_box: Linear,
    ent_ptr_q: Linear,
    ent_ptr_k: Linear,
    rel_queries: ParamId,
    layers: Vec<DecoderLayer>,
    rel_head: Linear,
    sub_head: Linear,
    obj_head: Linear,
    sub_ptr: Linear,
    obj_ptr: Linear,
    untied: UntiedHeads,
}

/// Nodes of one decoder layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub hidden: Var,
    pub rel_logits: Var,
    pub sub_logits: Var,
    pub obj_logits: Var,
    pub sub_box: Var,
    pub obj_box: Var,
}

/// Encoder and entity-decoder nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub image: Var,
    pub entities: Var,
    pub ent_logits: Var,
    pub ent_box: Var,
}

/// Value-level predictions of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub hidden: Mat,
    pub rel: Mat,
    pub sub: Mat,
    pub obj: Mat,
    pub sub_box: Mat,
    pub obj_box: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgtrOutput {
    pub layers: Vec<LayerOutput>,
    pub entity_probs: Mat,
    pub entity_boxes: Mat,
}

/// Last-layer mirrored predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct MirrorOutput {
    pub hidden: Mat,
    pub rel: Mat,
    pub sub: Mat,
    pub obj: Mat,
}

/// Ground truth in query-loss form.
struct GtTriplets {
    pred: Vec<usize>,
    sub: Vec<usize>,
    obj: Vec<usize>,
    sub_box: Vec<[f64; 4]>,
    obj_box: Vec<[f64; 4]>,
}

impl GtTriplets {
    fn new(sample: &SceneSample) -> Self {
        let mut gt = GtTriplets { pred: vec![], sub: vec![], obj: vec![], sub_box: vec![], obj_box: vec![] };
        for r in &sample.relations {
            let s = &sample.entities[sample.entity_index(r.subject_id).expect("validated sample")];
            let o = &sample.entities[sample.entity_index(r.object_id).expect("validated sample")];
            gt.pred.push(r.predicate_id);
            gt.sub.push(s.class_id);
            gt.obj.push(o.class_id);
            gt.sub_box.push(box_cxcywh(&s.bbox));
            gt.obj_box.push(box_cxcywh(&o.bbox));
        }
        gt
    }
}

fn l1(a: &[f64], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl MiniSgtr {
    pub fn new(dims: SgtrDims, head_mode: HeadMode, seed: u64) -> Self {
        assert!(dims.layers >= 2, "the predicate decoder needs at least two layers");
        let mut rng = rng::rng_for(seed, &[stream::INIT]);
        let mut store = ParamStore::new();
        let d = dims.d_model;
        let (h, f) = (dims.heads, dims.ffn);
        let bb = ParamGroup::Backbone;
        let patch_in = dims.patch * dims.patch * dims.feature_dim;
        let patch_embed = Linear::new(&mut store, "encoder.patch_embed", bb, patch_in, d, &mut rng);
        let pos_embed = store.add_normal("encoder.pos_embed", bb, dims.tokens(), d, 0.1, &mut rng);
        let enc_attn = Attention::new(&mut store, "encoder.attn", bb, d, h, &mut rng);
        let enc_ffn = FeedForward::new(&mut store, "encoder.ffn", bb, d, f, &mut rng);
        let ent_queries = store.add_normal("entity.queries", bb, dims.num_ent_queries, d, 1.0, &mut rng);
        let ent_cross = Attention::new(&mut store, "entity.cross", bb, d, h, &mut rng);
        let ent_ffn = FeedForward::new(&mut store, "entity.ffn", bb, d, f, &mut rng);
        let ent_class = Linear::new(&mut store, "entity.class", bb, d, dims.num_object_classes + 1, &mut rng);
        let ent_box = Linear::new(&mut store, "entity.box", bb, d, 4, &mut rng);
        let ent_ptr_q = Linear::new(&mut store, "entity.ptr_q", bb, d, d, &mut rng);
        let ent_ptr_k = Linear::new(&mut store, "entity.ptr_k", bb, d, d, &mut rng);
        let rp = ParamGroup::RelationPredictor;
        let rel_queries = store.add_normal("predicate.queries", rp, dims.num_rel_queries, d, 1.0, &mut rng);
        let layers = (0..dims.layers)
            .map(|l| DecoderLayer {
                self_attn: Attention::new(&mut store, &format!("predicate.{l}.self"), rp, d, h, &mut rng),
                cross_img: Attention::new(&mut store, &format!("predicate.{l}.cross_img"), rp, d, h, &mut rng),
                cross_ent: Attention::new(&mut store, &format!("predicate.{l}.cross_ent"), rp, d, h, &mut rng),
                ffn: FeedForward::new(&mut store, &format!("predicate.{l}.ffn"), rp, d, f, &mut rng),
            })
            .collect();
        let oh = ParamGroup::OriginalHead;
        let rel_head = Linear::new(&mut store, "head.rel", oh, d, dims.num_predicates, &mut rng);
        let sub_head = Linear::new(&mut store, "head.sub", oh, d, dims.num_object_classes, &mut rng);
        let obj_head = Linear::new(&mut store, "head.obj", oh, d, dims.num_object_classes, &mut rng);
        let sub_ptr = Linear::new(&mut store, "head.sub_ptr", oh, d, d, &mut rng);
        let obj_ptr = Linear::new(&mut store, "head.obj_ptr", oh, d, d, &mut rng);
        let untied = UntiedHeads {
            rel: build_untied_head(&mut store, "mirror.rel", &[d, dims.num_predicates], head_mode, &mut rng),
            sub: build_untied_head(&mut store, "mirror.sub", &[d, dims.num_object_classes], head_mode, &mut rng),
            obj: build_untied_head(&mut store, "mirror.obj", &[d, dims.num_object_classes], head_mode, &mut rng),
        };
        MiniSgtr {
            dims,
            head_mode,
            align_layers: AlignLayers::LastOnly,
            store,
            patch_embed,
            pos_embed,
            enc_attn,
            enc_ffn,
            ent_queries,
            ent_cross,
            ent_ffn,
            ent_class,
            ent_box,
            ent_ptr_q,
            ent_ptr_k,
            rel_queries,
            layers,
            rel_head,
            sub_head,
            obj_head,
            sub_ptr,
            obj_ptr,
            untied,
        }
    }

    /// Label heads (relation, subject, object) of the original branch.
    pub fn original_label_head_ids(&self) -> Vec<ParamId> {
        [&self.rel_head, &self.sub_head, &self.obj_head].iter().flat_map(|l| l.ids()).collect()
    }

    pub fn original_head_ids(&self) -> Vec<ParamId> {
        [&self.rel_head, &self.sub_head, &self.obj_head, &self.sub_ptr, &self.obj_ptr].iter().flat_map(|l| l.ids()).collect()
    }

    fn patches(&self, sample: &SceneSample) -> Mat {
        let d = self.dims;
        let (h, w, c) = sample.grid_shape();
        let (ph, pw) = (h.div_ceil(d.patch), w.div_ceil(d.patch));
        Mat::from_shape_fn((ph * pw, d.patch * d.patch * c), |(t, k)| {
            let (pr, pc) = (t / pw, t % pw);
            let cell = k / c;
            let (r, col) = (pr * d.patch + cell / d.patch, pc * d.patch + cell % d.patch);
            if r < h && col < w {
                sample.feature_grid[r][col][k % c]
            } else {
                0.0
            }
        })
    }

    pub fn encode<'s>(&'s self, g: &mut Graph<'s>, sample: &SceneSample) -> EncoderVars {
        let x = g.constant(self.patches(sample));
        let x = self.patch_embed.forward(g, x);
        let pos = g.param(self.pos_embed);
        let x = g.add(x, pos);
        let mut off = Dropout::off();
        let a = self.enc_attn.forward(g, x, x, None, &mut off);
        let x = residual_norm(g, x, a, &mut off);
        let f = self.enc_ffn.forward(g, x, &mut off);
        let image = residual_norm(g, x, f, &mut off);

        let q = g.param(self.ent_queries);
        let a = self.ent_cross.forward(g, q, image, None, &mut off);
        let e = residual_norm(g, q, a, &mut off);
        let f = self.ent_ffn.forward(g, e, &mut off);
        let entities = residual_norm(g, e, f, &mut off);
        let ent_logits = self.ent_class.forward(g, entities);
        let ent_box = self.entity_boxes(g, entities, image);
        EncoderVars { image, entities, ent_logits, ent_box }
    }

    /// `(cx, cy)` of every token in unit coordinates.
    fn token_centres(&self) -> Mat {
        let d = self.dims;
        let pw = d.grid_w.div_ceil(d.patch);
        Mat::from_shape_fn((d.tokens(), 2), |(t, k)| {
            let (r, c) = (t / pw, t % pw);
            if k == 0 {
                (((c * d.patch) as f64 + d.patch as f64 / 2.0) / d.grid_w as f64).min(1.0)
            } else {
                (((r * d.patch) as f64 + d.patch as f64 / 2.0) / d.grid_h as f64).min(1.0)
            }
        })
    }

    fn entity_boxes(&self, g: &mut Graph, entities: Var, image: Var) -> Var {
        let d = self.dims;
        let ne = g.shape(entities).0;
        let q = self.ent_ptr_q.forward(g, entities);
        let k = self.ent_ptr_k.forward(g, image);
        let logits = g.matmul_nt(q, k);
        let logits = g.scale(logits, 1.0 / (d.d_model as f64).sqrt());
        let ptr = g.softmax(logits);
        let centres = g.constant(self.token_centres());
        let reference = g.matmul(ptr, centres);
        let raw = self.ent_box.forward(g, entities);
        let off = g.slice_cols(raw, 0, 2);
        let off = g.tanh(off);
        let token = Mat::from_shape_fn((ne, 2), |(_, k)| d.patch as f64 / if k == 0 { d.grid_w } else { d.grid_h } as f64);
        let off = g.mul_const(off, token);
        let centre = g.add(reference, off);
        let size = g.slice_cols(raw, 2, 4);
        let size = g.sigmoid(size);
        g.concat_cols(&[centre, size])
    }

    /// Pointer from predicate queries into the (detached) entity boxes.
    fn pointer_box(&self, g: &mut Graph, ptr: &Linear, hidden: Var, entities: Var, ent_box: Var) -> Var {
        let q = ptr.forward(g, hidden);
        let logits = g.matmul_nt(q, entities);
        let logits = g.scale(logits, 1.0 / (self.dims.d_model as f64).sqrt());
        let w = g.softmax(logits);
        g.matmul(w, ent_box)
    }

    fn heads(&self, g: &mut Graph, hidden: Var, enc: &EncoderVars, ent_box: Var) -> LayerVars {
        let rel_logits = self.rel_head.forward(g, hidden);
        let sub_logits = self.sub_head.forward(g, hidden);
        let obj_logits = self.obj_head.forward(g, hidden);
        let sub_box = self.pointer_box(g, &self.sub_ptr, hidden, enc.entities, ent_box);
        let obj_box = self.pointer_box(g, &self.obj_ptr, hidden, enc.entities, ent_box);
        LayerVars { hidden, rel_logits, sub_logits, obj_logits, sub_box, obj_box }
    }

    /// Original predicate decoder; predictions at every layer.
    pub fn decode_original<'s>(&'s self, g: &mut Graph<'s>, enc: &EncoderVars, dropout: &mut Dropout) -> Vec<LayerVars> {
        // relation-box losses train the pointers, not the entity boxes
        let ent_box = g.detach(enc.ent_box);
        let mut x = g.param(self.rel_queries);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = layer.self_attn.forward(g, x, x, None, dropout);
            x = residual_norm(g, x, a, dropout);
            let a = layer.cross_img.forward(g, x, enc.image, None, dropout);
            x = residual_norm(g, x, a, dropout);
            let a = layer.cross_ent.forward(g, x, enc.entities, None, dropout);
            x = residual_norm(g, x, a, dropout);
            let f = layer.ffn.forward(g, x, dropout);
            x = residual_norm(g, x, f, dropout);
            out.push(self.heads(g, x, enc, ent_box));
        }
        out
    }

    /// Mirrored predicate decoder: detached inputs, no dropout, fresh entry
    /// masks per cross-attention block. Returns `(hidden, rel, sub, obj)`
    /// logits for each layer (heads applied only where alignment needs them).
    pub fn decode_mirrored<'s>(&'s self, g: &mut Graph<'s>, enc: &EncoderVars, p: f64, rng: &mut Rng, counter: &AtomicUsize) -> Vec<(Var, Option<[Var; 3]>)> {
        bump(counter);
        let image = g.detach(enc.image);
        let entities = g.detach(enc.entities);
        let (nq, nt, ne) = (self.dims.num_rel_queries, g.shape(image).0, g.shape(entities).0);
        let mut off = Dropout::off();
        let mut x = g.param(self.rel_queries);
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let a = layer.self_attn.forward(g, x, x, None, &mut off);
            x = residual_norm(g, x, a, &mut off);
            let m_img = draw_entry_mask(nq, nt, p, rng);
            let a = layer.cross_img.forward(g, x, image, Some(&m_img), &mut off);
            x = residual_norm(g, x, a, &mut off);
            let m_ent = draw_entry_mask(nq, ne, p, rng);
            let a = layer.cross_ent.forward(g, x, entities, Some(&m_ent), &mut off);
            x = residual_norm(g, x, a, &mut off);
            let f = layer.ffn.forward(g, x, &mut off);
            x = residual_norm(g, x, f, &mut off);
            let heads = (l == last || self.align_layers == AlignLayers::All).then(|| self.mirror_heads(g, x));
            out.push((x, heads));
        }
        out
    }

    fn mirror_heads(&self, g: &mut Graph, x: Var) -> [Var; 3] {
        let pick = |g: &mut Graph, untied: &MirrorHead, tied: &Linear| match untied {
            MirrorHead::Untied(h) => h.forward(g, x),
            MirrorHead::Tied => tied.forward(g, x),
        };
        [pick(g, &self.untied.rel, &self.rel_head), pick(g, &self.untied.sub, &self.sub_head), pick(g, &self.untied.obj, &self.obj_head)]
    }

    /// Forward of the original branch; `dropout_rng = None` disables dropout.
    pub fn forward_original(&self, sample: &SceneSample, dropout_rng: Option<&mut Rng>) -> SgtrOutput {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, sample);
        let mut drop = Dropout { rate: self.dims.dropout, rng: dropout_rng };
        let layers = self.decode_original(&mut g, &enc, &mut drop);
        let layers = layers
            .iter()
            .map(|lv| {
                let rel = g.softmax(lv.rel_logits);
                let sub = g.softmax(lv.sub_logits);
                let obj = g.softmax(lv.obj_logits);
                LayerOutput {
                    hidden: g.value(lv.hidden).clone(),
                    rel: g.value(rel).clone(),
                    sub: g.value(sub).clone(),
                    obj: g.value(obj).clone(),
                    sub_box: g.value(lv.sub_box).clone(),
                    obj_box: g.value(lv.obj_box).clone(),
                }
            })
            .collect();
        let ep = g.softmax(enc.ent_logits);
        SgtrOutput { layers, entity_probs: g.value(ep).clone(), entity_boxes: g.value(enc.ent_box).clone() }
    }

    /// Mirrored branch on one sample, last layer.
    pub fn forward_mirrored(&self, sample: &SceneSample, p: f64, rng: &mut Rng, counter: &AtomicUsize) -> MirrorOutput {
        let mut g = Graph::new(&self.store);
        let enc = self.encode(&mut g, sample);
        let layers = self.decode_mirrored(&mut g, &enc, p, rng, counter);
        let (hidden, heads) = *layers.last().expect("at least two layers");
        let [r, s, o] = heads.expect("last layer has heads");
        let (r, s, o) = (g.softmax(r), g.softmax(s), g.softmax(o));
        MirrorOutput { hidden: g.value(hidden).clone(), rel: g.value(r).clone(), sub: g.value(s).clone(), obj: g.value(o).clone() }
    }

    /// Dropout-free original forward, last layer, as an alignment target.
    pub fn alignment_target(&self, sample: &SceneSample) -> AlignTarget {
        let out = self.forward_original(sample, None);
        let last = out.layers.last().expect("at least two layers");
        AlignTarget { relation: last.rel.clone(), subject: Some(last.sub.clone()), object: Some(last.obj.clone()) }
    }

    /// Greedy query ↔ triplet matching on one layer's predictions.
    fn match_layer(&self, g: &Graph, lv: &LayerVars, gt: &GtTriplets) -> Vec<Option<usize>> {
        if gt.pred.is_empty() {
            return vec![None; self.dims.num_rel_queries];
        }
        let rel = crate::autograd::softmax_rows(g.value(lv.rel_logits));
        let sub = crate::autograd::softmax_rows(g.value(lv.sub_logits));
        let obj = crate::autograd::softmax_rows(g.value(lv.obj_logits));
        let sb = g.value(lv.sub_box);
        let ob = g.value(lv.obj_box);
        let cost: Vec<Vec<f64>> = (0..self.dims.num_rel_queries)
            .map(|q| {
                (0..gt.pred.len())
                    .map(|t| {
                        -(rel[[q, gt.pred[t]]] + sub[[q, gt.sub[t]]] + obj[[q, gt.obj[t]]])
                            + l1(sb.row(q).as_slice().expect("contiguous"), &gt.sub_box[t])
                            + l1(ob.row(q).as_slice().expect("contiguous"), &gt.obj_box[t])
                    })
                    .collect()
            })
            .collect();
        greedy_assign(&cost)
    }

    /// Relation/subject/object label losses for given logits and a matching.
    fn label_loss(&self, g: &mut Graph, rel: Var, sub: Var, obj: Var, assign: &[Option<usize>], gt: &GtTriplets) -> Var {
        let nq = assign.len();
        let rel_t: Vec<usize> = assign.iter().map(|a| a.map_or(BACKGROUND, |t| gt.pred[t])).collect();
        let rel_w: Vec<f64> = assign.iter().map(|a| if a.is_some() { 1.0 } else { NO_MATCH_WEIGHT }).collect();
        let denom: f64 = rel_w.iter().sum();
        let lp = g.log_softmax(rel);
        let mut loss = g.nll(lp, &rel_t, &rel_w, denom);
        let matched: Vec<usize> = (0..nq).filter(|&q| assign[q].is_some()).collect();
        if !matched.is_empty() {
            let n = matched.len() as f64;
            let w = vec![1.0; nq];
            let mut s_t = vec![0; nq];
            let mut o_t = vec![0; nq];
            let mut mw = vec![0.0; nq];
            for &q in &matched {
                let t = assign[q].expect("matched");
                s_t[q] = gt.sub[t];
                o_t[q] = gt.obj[t];
                mw[q] = w[q];
            }
            let slp = g.log_softmax(sub);
            let sl = g.nll(slp, &s_t, &mw, n);
            let olp = g.log_softmax(obj);
            let ol = g.nll(olp, &o_t, &mw, n);
            loss = g.add(loss, sl);
            loss = g.add(loss, ol);
        }
        loss
    }

    fn box_loss(&self, g: &mut Graph, boxes: Var, rows: &[usize], targets: &[[f64; 4]]) -> Option<Var> {
        if rows.is_empty() {
            return None;
        }
        let picked = g.gather_rows(boxes, rows);
        let t = Mat::from_shape_fn((rows.len(), 4), |(i, k)| targets[i][k]);
        let neg = t.mapv(|v| -v);
        let diff = g.add_const(picked, &neg);
        let a = g.abs(diff);
        let s = g.sum(a);
        Some(g.scale(s, BOX_LOSS_WEIGHT / rows.len() as f64))
    }

    fn layer_loss(&self, g: &mut Graph, lv: &LayerVars, gt: &GtTriplets) -> (Var, Vec<Option<usize>>) {
        let assign = self.match_layer(g, lv, gt);
        let mut loss = self.label_loss(g, lv.rel_logits, lv.sub_logits, lv.obj_logits, &assign, gt);
        let rows: Vec<usize> = (0..assign.len()).filter(|&q| assign[q].is_some()).collect();
        let st: Vec<[f64; 4]> = rows.iter().map(|&q| gt.sub_box[assign[q].expect("matched")]).collect();
        let ot: Vec<[f64; 4]> = rows.iter().map(|&q| gt.obj_box[assign[q].expect("matched")]).collect();
        for b in [self.box_loss(g, lv.sub_box, &rows, &st), self.box_loss(g, lv.obj_box, &rows, &ot)].into_iter().flatten() {
            loss = g.add(loss, b);
        }
        (loss, assign)
    }

    fn entity_loss(&self, g: &mut Graph, enc: &EncoderVars, sample: &SceneSample) -> Var {
        let ne = self.dims.num_ent_queries;
        let no_obj = self.dims.num_object_classes;
        let probs = crate::autograd::softmax_rows(g.value(enc.ent_logits));
        let boxes = g.value(enc.ent_box).clone();
        let targets: Vec<[f64; 4]> = sample.entities.iter().map(|e| box_cxcywh(&e.bbox)).collect();
        let cost: Vec<Vec<f64>> = (0..ne)
            .map(|q| {
                sample
                    .entities
                    .iter()
                    .zip(&targets)
                    .map(|(e, t)| -probs[[q, e.class_id]] + l1(boxes.row(q).as_slice().expect("contiguous"), t))
                    .collect()
            })
            .collect();
        let assign = if sample.entities.is_empty() { vec![None; ne] } else { greedy_assign(&cost) };
        let cls_t: Vec<usize> = assign.iter().map(|a| a.map_or(no_obj, |t| sample.entities[t].class_id)).collect();
        let w: Vec<f64> = assign.iter().map(|a| if a.is_some() { 1.0 } else { NO_MATCH_WEIGHT }).collect();
        let denom: f64 = w.iter().sum();
        let lp = g.log_softmax(enc.ent_logits);
        let mut loss = g.nll(lp, &cls_t, &w, denom);
        let rows: Vec<usize> = (0..ne).filter(|&q| assign[q].is_some()).collect();
        let bt: Vec<[f64; 4]> = rows.iter().map(|&q| targets[assign[q].expect("matched")]).collect();
        if let Some(b) = self.box_loss(g, enc.ent_box, &rows, &bt) {
            loss = g.add(loss, b);
        }
        loss
    }

    /// Subject/object assembly: the entity maximising label agreement times
    /// location proximity.
    fn assemble(&self, ent_probs: &Mat, ent_boxes: &Mat, labels: &Mat, boxes: &Mat, q: usize, exclude: Option<usize>) -> usize {
        let c = self.dims.num_object_classes;
        let mut best = (f64::NEG_INFINITY, 0);
        for e in 0..ent_probs.nrows() {
            if Some(e) == exclude {
                continue;
            }
            let agree: f64 = (0..c).map(|k| labels[[q, k]] * ent_probs[[e, k]]).sum();
            let dist: f64 = (0..4).map(|k| (boxes[[q, k]] - ent_boxes[[e, k]]).abs()).sum();
            let score = agree * (-dist).exp();
            if score > best.0 {
                best = (score, e);
            }
        }
        best.1
    }
}

impl SceneGraphModel for MiniSgtr {
    fn family(&self) -> ModelFamily {
        ModelFamily::MiniSgtr
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn supports(&self, mode: EvalMode) -> bool {
        mode == EvalMode::SgDet
    }

    fn predict(&self, sample: &SceneSample, mode: EvalMode) -> Result<ScenePrediction> {
        if !self.supports(mode) {
            return Err(Error::UnsupportedMode { family: self.family().name().into(), mode: mode.name().into() });
        }
        let out = self.forward_original(sample, None);
        let c = self.dims.num_object_classes;
        let entities: Vec<PredEntity> = out
            .entity_probs
            .rows()
            .into_iter()
            .zip(out.entity_boxes.rows())
            .map(|(p, b)| {
                let class_id = argmax(&p.as_slice().expect("contiguous")[..c]);
                PredEntity { class_id, bbox: box_from_cxcywh(b.as_slice().expect("contiguous")), score: p[class_id] }
            })
            .collect();
        let last = out.layers.last().expect("at least two layers");
        let mut pairs: Vec<PairPrediction> = Vec::new();
        if entities.len() >= 2 {
            for q in 0..self.dims.num_rel_queries {
                let s = self.assemble(&out.entity_probs, &out.entity_boxes, &last.sub, &last.sub_box, q, None);
                let o = self.assemble(&out.entity_probs, &out.entity_boxes, &last.obj, &last.obj_box, q, Some(s));
                let probs = last.rel.row(q).to_vec();
                let top = |p: &[f64]| p.iter().skip(1).cloned().fold(0.0, f64::max);
                match pairs.iter_mut().find(|pp| pp.subject == s && pp.object == o) {
                    Some(existing) if top(&existing.probs) >= top(&probs) => {}
                    Some(existing) => existing.probs = probs,
                    None => pairs.push(PairPrediction { subject: s, object: o, probs }),
                }
            }
        }
        Ok(ScenePrediction { entities, pairs })
    }

    fn sample_loss<'s>(&'s self, g: &mut Graph<'s>, sample: &SceneSample, ctx: &mut StepCtx, counter: &AtomicUsize) -> Result<LossVars> {
        let gt = GtTriplets::new(sample);
        let enc = self.encode(g, sample);
        let dropout_active = self.dims.dropout > 0.0;
        let layers = {
            let mut drop = Dropout { rate: self.dims.dropout, rng: Some(&mut *ctx.dropout_rng) };
            self.decode_original(g, &enc, &mut drop)
        };
        let mut original = self.entity_loss(g, &enc, sample);
        let mut last_assign = Vec::new();
        for lv in &layers {
            let (l, a) = self.layer_loss(g, lv, &gt);
            original = g.add(original, l);
            last_assign = a;
        }

        let align = match ctx.align.target_mode {
            TargetMode::Off => None,
            mode => {
                let target_layers: Vec<LayerVars> = if dropout_active && mode == TargetMode::SelfSupervised {
                    self.decode_original(g, &enc, &mut Dropout::off())
                } else {
                    layers.clone()
                };
                let mirror = self.decode_mirrored(g, &enc, ctx.align.p, ctx.mask_rng, counter);
                let mut total: Option<Var> = None;
                for (l, (_, heads)) in mirror.iter().enumerate() {
                    let Some([r, s, o]) = *heads else { continue };
                    let term = match mode {
                        TargetMode::SelfSupervised => {
                            let tv = &target_layers[l];
                            let mut acc = None;
                            for (tl, ml) in [(tv.rel_logits, r), (tv.sub_logits, s), (tv.obj_logits, o)] {
                                let t = g.detach(tl);
                                let target = crate::autograd::softmax_rows(g.value(t));
                                let mp = g.softmax(ml);
                                let k = kl_alignment_term(g, &target, mp);
                                acc = Some(match acc {
                                    Some(a) => g.add(a, k),
                                    None => k,
                                });
                            }
                            acc.expect("three terms")
                        }
                        _ => {
                            let assign = if l + 1 == layers.len() { last_assign.clone() } else { self.match_layer(g, &layers[l], &gt) };
                            self.label_loss(g, r, s, o, &assign, &gt)
                        }
                    };
                    total = Some(match total {
                        Some(t) => g.add(t, term),
                        None => term,
                    });
                }
                total
            }
        };
        Ok(combine_in_graph(g, original, align, &ctx.align))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};
    use crate::rng::rng_for;

    fn setup() -> (MiniSgtr, Vec<SceneSample>) {
        let spec = CorpusSpec { n_train: 6, n_val: 1, n_test: 1, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        (MiniSgtr::new(SgtrDims::desk((16, 16, 32), 10, 16), HeadMode::Untied, 4), corpus.train)
    }

    #[test]
    fn dropout_off_forward_is_deterministic_and_valid() {
        let (m, data) = setup();
        let a = m.forward_original(&data[0], None);
        let b = m.forward_original(&data[0], None);
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 3);
        for l in &a.layers {
            for p in [&l.rel, &l.sub, &l.obj] {
                assert!(p.rows().into_iter().all(|r| (r.sum() - 1.0).abs() < 1e-9));
            }
        }
    }

    #[test]
    fn dropout_changes_the_original_branch() {
        let (m, data) = setup();
        let a = m.forward_original(&data[0], None);
        let b = m.forward_original(&data[0], Some(&mut rng_for(9, &[])));
        assert_ne!(a.layers[2].rel, b.layers[2].rel);
    }

    #[test]
    fn mirror_at_p_zero_and_p_one_equals_the_dropout_free_original() {
        let (m, data) = setup();
        let counter = AtomicUsize::new(0);
        let orig = m.forward_original(&data[1], None);
        for p in [0.0, 1.0] {
            let mir = m.forward_mirrored(&data[1], p, &mut rng_for(3, &[]), &counter);
            assert_eq!(mir.hidden, orig.layers[2].hidden);
        }
        let mir = m.forward_mirrored(&data[1], 0.1, &mut rng_for(3, &[]), &counter);
        assert_ne!(mir.hidden, orig.layers[2].hidden);
        assert_eq!(counter.into_inner(), 3);
    }

    #[test]
    fn zeroed_heads_give_uniform_distributions() {
        let (mut m, data) = setup();
        for id in m.original_label_head_ids() {
            m.store_mut().get_mut(id).fill(0.0);
        }
        let out = m.forward_original(&data[0], None);
        assert!(out.layers[0].rel.iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(out.layers[2].sub.iter().all(|&v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn only_sgdet_is_supported() {
        let (m, data) = setup();
        assert!(matches!(m.predict(&data[0], EvalMode::PredCls), Err(Error::UnsupportedMode { .. })));
        let pred = m.predict(&data[0], EvalMode::SgDet).unwrap();
        assert_eq!(pred.entities.len(), 10);
        assert!(pred.pairs.iter().all(|p| p.subject != p.object));
    }

    #[test]
    fn micro_instance_is_small() {
        let m = MiniSgtr::new(SgtrDims::micro((4, 4, 2), 2, 3), HeadMode::Untied, 0);
        assert!(m.store().num_scalars() <= 1000, "{}", m.store().num_scalars());
    }
}
