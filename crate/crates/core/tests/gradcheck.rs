//! Finite differences of the full objective L_orig + λ·L_align on micro
//! models, every mode and head configuration.
//!
//! Stop-gradient targets are pinned to the values of the unperturbed pass,
//! so the numeric side differentiates the same surrogate that backward does.

use std::sync::atomic::AtomicUsize;

use relalign::align::{AlignConfig, HeadMode, TargetMode};
use relalign::autograd::Graph;
use relalign::datagen::{generate_corpus, CorpusMeta, CorpusSpec};
use relalign::models::{AnyModel, EvalMode, MiniMotifs, MiniSgtr, MotifsDims, SceneGraphModel, SgtrDims, StepCtx};
use relalign::params::{Grads, Mat, ParamId};
use relalign::rng::{rng_for, stream};
use relalign::types::SceneSample;

/// Step of the five-point stencil (fourth-order truncation error).
const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;
/// Denominator floor: below it an entry is compared in absolute terms.
const FLOOR: f64 = 1e-5;

fn micro_spec() -> CorpusSpec {
    CorpusSpec { n_train: 8, n_val: 1, n_test: 1, num_object_classes: 3, num_predicates: 4, height: 4, width: 6, feature_dim: 2, max_entities: 3, ..CorpusSpec::default() }
}

fn loss(model: &dyn SceneGraphModel, s: &SceneSample, cfg: AlignConfig, mode: EvalMode, pinned: Option<&[Mat]>) -> (f64, Option<Grads>, Vec<Mat>) {
    let mut d = rng_for(5, &[stream::DROPOUT]);
    let mut m = rng_for(5, &[stream::MASK]);
    let mut ctx = StepCtx { align: cfg, mode, dropout_rng: &mut d, mask_rng: &mut m };
    let counter = AtomicUsize::new(0);
    let mut g = match pinned {
        Some(p) => Graph::pinned(model.store(), p.to_vec()),
        None => Graph::new(model.store()),
    };
    let l = model.sample_loss(&mut g, s, &mut ctx, &counter).expect("loss");
    let grads = pinned.is_none().then(|| g.backward(l.total));
    (g.scalar(l.total), grads, g.detached_values().to_vec())
}

fn check(mut model: AnyModel, cfg: AlignConfig, mode: EvalMode) {
    assert!(model.store().num_scalars() <= 1000);
    let spec = micro_spec();
    let corpus = generate_corpus(&spec).expect("spec");
    for sample in corpus.train.iter().filter(|s| !s.relations.is_empty()).take(2) {
        let (_, grads, pinned) = loss(&model, sample, cfg, mode, None);
        let grads = grads.expect("grads");
        let ids: Vec<ParamId> = model.store().entries().filter(|(_, e)| !e.frozen).map(|(id, _)| id).collect();
        for id in ids {
            for i in 0..model.store().get(id).len() {
                let x0 = model.store().get(id).as_slice().expect("standard layout")[i];
                let mut at = |x: f64| {
                    model.store_mut().get_mut(id).as_slice_mut().expect("standard layout")[i] = x;
                    loss(&model, sample, cfg, mode, Some(&pinned)).0
                };
                let numeric = (8.0 * (at(x0 + EPS) - at(x0 - EPS)) - (at(x0 + 2.0 * EPS) - at(x0 - 2.0 * EPS))) / (12.0 * EPS);
                at(x0);
                let analytic = grads.get(id).map_or(0.0, |g| g.as_slice().expect("standard layout")[i]);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
                assert!(rel < TOL, "{} [{i}]: analytic {analytic:e}, numeric {numeric:e}", model.store().entry(id).name);
            }
        }
    }
}

fn meta() -> CorpusMeta {
    let spec = micro_spec();
    let c = generate_corpus(&spec).expect("spec");
    CorpusMeta::from_corpus(&spec, &c).expect("meta")
}

fn motifs(head: HeadMode) -> AnyModel {
    let m = meta();
    AnyModel::Motifs(MiniMotifs::new(MotifsDims::micro(2, 3, 4), m.prior, head, 1))
}

fn sgtr(head: HeadMode) -> AnyModel {
    AnyModel::Sgtr(MiniSgtr::new(SgtrDims::micro((4, 6, 2), 3, 4), head, 1))
}

fn cfg(target_mode: TargetMode, head_mode: HeadMode) -> AlignConfig {
    AlignConfig { lambda: 10.0, p: 0.4, target_mode, head_mode }
}

#[test]
fn motifs_all_modes_ssa() {
    for mode in [EvalMode::PredCls, EvalMode::SgCls, EvalMode::SgDet] {
        check(motifs(HeadMode::Untied), cfg(TargetMode::SelfSupervised, HeadMode::Untied), mode);
    }
}

#[test]
fn motifs_all_modes_sa() {
    for mode in [EvalMode::PredCls, EvalMode::SgCls, EvalMode::SgDet] {
        check(motifs(HeadMode::Untied), cfg(TargetMode::Supervised, HeadMode::Untied), mode);
    }
}

#[test]
fn motifs_tied_head() {
    check(motifs(HeadMode::Tied), cfg(TargetMode::SelfSupervised, HeadMode::Tied), EvalMode::SgCls);
}

#[test]
fn motifs_without_alignment() {
    check(motifs(HeadMode::Untied), AlignConfig::off(), EvalMode::PredCls);
}

#[test]
fn sgtr_ssa_and_sa() {
    check(sgtr(HeadMode::Untied), cfg(TargetMode::SelfSupervised, HeadMode::Untied), EvalMode::SgDet);
    check(sgtr(HeadMode::Untied), cfg(TargetMode::Supervised, HeadMode::Untied), EvalMode::SgDet);
}

#[test]
fn sgtr_tied_head() {
    check(sgtr(HeadMode::Tied), cfg(TargetMode::SelfSupervised, HeadMode::Tied), EvalMode::SgDet);
}

#[test]
fn pinned_replay_reproduces_the_loss() {
    let model = sgtr(HeadMode::Untied);
    let spec = micro_spec();
    let c = generate_corpus(&spec).expect("spec");
    let a = cfg(TargetMode::SelfSupervised, HeadMode::Untied);
    let (l, _, pinned) = loss(&model, &c.train[0], a, EvalMode::SgDet, None);
    assert!(!pinned.is_empty());
    let (again, _, replayed) = loss(&model, &c.train[0], a, EvalMode::SgDet, Some(&pinned));
    assert_eq!(l, again);
    assert_eq!(pinned, replayed);
}
