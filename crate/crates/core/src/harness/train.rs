//! Joint training of the original and mirrored branches.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::datagen::{Corpus, CorpusMeta, PartitionSpec};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions};
use crate::exec::{self, Exec};
use crate::harness::config::{ModelSize, TrainConfig, SELECTION_K};
use crate::metrics::EvalReport;
use crate::models::{AnyModel, EvalMode, MiniMotifs, MiniSgtr, ModelFamily, MotifsDims, PredictorPair, SceneGraphModel, SgtrDims, StepCtx};
use crate::optim::{clip_global_norm, cosine_lr, Optimizer, OptimizerConfig};
use crate::params::Grads;
use crate::rng::{self, stream};
use crate::types::SceneSample;

/// Batch-mean losses of one step. `l_final = l_original + λ·l_align` holds
/// exactly (it is computed from the other two).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_original: f64,
    pub l_align: f64,
    pub l_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub lr: f64,
    pub clip_norm: f64,
    /// Base seed of the dropout streams.
    pub seed: u64,
    pub iteration: usize,
    pub mode: EvalMode,
    pub exec: Exec,
}

/// Gradient of the batch-mean `L_final` and its loss breakdown, without
/// updating anything.
pub fn batch_gradient<M: SceneGraphModel>(pair: &PredictorPair<M>, batch: &[&SceneSample], s: &StepSettings) -> Result<(Grads, LossBreakdown)> {
    let model = &pair.model;
    let align = pair.align_cfg;
    let mask_seed = pair.mask_cfg.seed;
    let counter = pair.mirror_counter();
    let it = s.iteration as u64;
    let per_sample = exec::map_indexed(s.exec, batch.len(), |i| -> Result<(Grads, f64, f64)> {
        let mut dropout_rng = rng::rng_for(s.seed, &[stream::DROPOUT, it, i as u64]);
        let mut mask_rng = rng::rng_for(mask_seed, &[stream::MASK, it, i as u64]);
        let mut ctx = StepCtx { align, mode: s.mode, dropout_rng: &mut dropout_rng, mask_rng: &mut mask_rng };
        let mut g = Graph::new(model.store());
        let loss = model.sample_loss(&mut g, batch[i], &mut ctx, counter)?;
        let lo = g.scalar(loss.original);
        let la = loss.align.map_or(0.0, |a| g.scalar(a));
        if !lo.is_finite() || !la.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: s.iteration, detail: format!("sample {} original={lo} align={la}", batch[i].sample_id) });
        }
        Ok((g.backward(loss.total), lo, la))
    });
    let mut grads = Grads::zeros_like(model.store());
    let (mut lo, mut la) = (0.0, 0.0);
    for r in per_sample {
        let (g, o, a) = r?;
        grads.add_assign(&g);
        lo += o;
        la += a;
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    let (lo, la) = (lo / n, la / n);
    let l_final = if align.uses_mirror() { lo + align.lambda * la } else { lo };
    Ok((grads, LossBreakdown { l_original: lo, l_align: la, l_final }))
}

/// One joint optimizer step on `L_final` over `batch`.
pub fn train_step<M: SceneGraphModel>(pair: &mut PredictorPair<M>, batch: &[&SceneSample], opt: &mut Optimizer, s: &StepSettings) -> Result<LossBreakdown> {
    let (mut grads, losses) = batch_gradient(pair, batch, s)?;
    if s.clip_norm > 0.0 {
        let norm = clip_global_norm(&mut grads, s.clip_norm);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: s.iteration, detail: format!("gradient norm {norm}") });
        }
    }
    opt.step(pair.model.store_mut(), &grads, s.lr);
    Ok(losses)
}

pub fn optimizer_for(family: ModelFamily) -> OptimizerConfig {
    match family {
        ModelFamily::MiniSgtr => OptimizerConfig::adamw_default(),
        ModelFamily::MiniMotifs => OptimizerConfig::sgd_default(),
    }
}

/// Fresh model for `cfg` on the corpus described by `meta`.
pub fn build_model(cfg: &TrainConfig, meta: &CorpusMeta) -> AnyModel {
    let sp = &meta.spec;
    let init_seed = rng::derive_seed(cfg.seed, &[stream::INIT]);
    match cfg.model {
        ModelFamily::MiniSgtr => {
            let grid = (sp.height, sp.width, sp.feature_dim);
            let dims = match cfg.size {
                ModelSize::Desk => SgtrDims::desk(grid, sp.num_object_classes, sp.num_predicates),
                ModelSize::Micro => SgtrDims::micro(grid, sp.num_object_classes, sp.num_predicates),
            };
            AnyModel::Sgtr(MiniSgtr::new(dims, cfg.align.head_mode, init_seed))
        }
        ModelFamily::MiniMotifs => {
            let dims = match cfg.size {
                ModelSize::Desk => MotifsDims::desk(sp.feature_dim, sp.num_object_classes, sp.num_predicates),
                ModelSize::Micro => MotifsDims::micro(sp.feature_dim, sp.num_object_classes, sp.num_predicates),
            };
            AnyModel::Motifs(MiniMotifs::new(dims, meta.prior.clone(), cfg.align.head_mode, init_seed))
        }
    }
}

/// Validation result at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub val: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub corpus_hash: String,
    pub num_predicates: usize,
    pub partition: PartitionSpec,
    pub eval_points: Vec<EvalPoint>,
    /// Index into `eval_points` of the selected model.
    pub selected: usize,
    pub selected_checkpoint: Option<String>,
    pub test: EvalReport,
    /// Every `log_every`-th step's losses.
    pub loss_curve: Vec<(usize, LossBreakdown)>,
    pub train_mirror_calls: usize,
    /// Mirrored-branch calls made while evaluating; always 0.
    pub eval_mirror_calls: usize,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn selected_val(&self) -> &EvalReport {
        &self.eval_points[self.selected].val
    }

    /// The record with timing removed, for determinism comparisons.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord { wall_clock_secs: 0.0, ..self.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
    }
}

/// Earliest eval point with the highest validation mR@50.
pub fn select_best(points: &[EvalPoint]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        let v = p.val.mean_recall(SELECTION_K).unwrap_or(0.0);
        if v > points[best].val.mean_recall(SELECTION_K).unwrap_or(0.0) {
            best = i;
        }
    }
    best
}

pub struct TrainOutcome {
    pub record: RunRecord,
    /// Parameters of the selected eval point.
    pub model: AnyModel,
    /// Files written under the output directory.
    pub files: Vec<PathBuf>,
}

const LOG_EVERY: usize = 10;

/// Full training run: optional detector pre-training, joint training with
/// periodic validation, selection by validation mR@50, test evaluation.
pub fn run_training(cfg: &TrainConfig, meta: &CorpusMeta, corpus: &Corpus, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let limit = |v: &[SceneSample], n: Option<usize>| v[..n.unwrap_or(v.len()).min(v.len())].to_vec();
    let train = limit(&corpus.train, cfg.train_limit);
    let val = limit(&corpus.val, cfg.val_limit);
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }

    let mut model = build_model(cfg, meta);
    if let AnyModel::Motifs(m) = &mut model {
        if cfg.mode == EvalMode::SgDet {
            m.pretrain_detector(&corpus.train, cfg.detector_epochs, cfg.seed, cfg.exec);
        }
    }
    let mut opt = Optimizer::new(optimizer_for(cfg.model), model.store());
    let mut pair = PredictorPair::new(model, cfg.mask, cfg.align);

    let ks = cfg.ks_with_selection();
    let eval_opts = |mode| EvalOptions {
        mode,
        ks: &ks,
        graph_constraint: cfg.graph_constraint,
        num_predicates: meta.spec.num_predicates,
        partition: &meta.partition,
        exec: cfg.exec,
    };
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut files = Vec::new();
    let corpus_hash = meta.spec.hash();

    let mut batch_rng = rng::rng_for(cfg.seed, &[stream::BATCH]);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut points: Vec<EvalPoint> = Vec::new();
    let mut best_store = pair.model.store().clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut loss_curve = Vec::new();
    let mut eval_mirror_calls = 0;
    let mut last = LossBreakdown::default();

    for it in 0..cfg.total_iterations {
        let mut batch: Vec<&SceneSample> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let settings = StepSettings {
            lr: cosine_lr(cfg.base_lr, it, cfg.total_iterations),
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            iteration: it,
            mode: cfg.mode,
            exec: cfg.exec,
        };
        last = train_step(&mut pair, &batch, &mut opt, &settings)?;
        if it % LOG_EVERY == 0 {
            loss_curve.push((it, last));
        }
        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.total_iterations {
            let before = pair.mirror_calls();
            let report = evaluate(&pair.model, &val, &eval_opts(cfg.mode))?;
            eval_mirror_calls += pair.mirror_calls() - before;
            let score = report.mean_recall(SELECTION_K).unwrap_or(0.0);
            let improved = score > best_score;
            if improved {
                best_score = score;
                best_store = pair.model.store().clone();
            }
            if let Some(d) = &ckpt_dir {
                if cfg.keep_all_checkpoints {
                    let path = d.join(format!("iter_{done:06}.json"));
                    Checkpoint::capture(&pair.model, &corpus_hash, cfg.align, cfg.mask, cfg.mode, done).save(&path)?;
                    files.push(path);
                }
            }
            points.push(EvalPoint { iteration: done, losses: last, val: report });
        }
    }
    let _ = last;

    let train_mirror_calls = pair.mirror_calls();
    let selected = select_best(&points);
    *pair.model.store_mut() = best_store;
    let before = pair.mirror_calls();
    let test = evaluate(&pair.model, &corpus.test, &eval_opts(cfg.mode))?;
    eval_mirror_calls += pair.mirror_calls() - before;

    let selected_checkpoint = match &ckpt_dir {
        Some(d) => {
            let path = d.join("selected.json");
            Checkpoint::capture(&pair.model, &corpus_hash, cfg.align, cfg.mask, cfg.mode, points[selected].iteration).save(&path)?;
            files.push(path.clone());
            Some(path.file_name().expect("file").to_string_lossy().into_owned())
        }
        None => None,
    };

    let record = RunRecord {
        config: cfg.clone(),
        corpus_hash,
        num_predicates: meta.spec.num_predicates,
        partition: meta.partition.clone(),
        eval_points: points,
        selected,
        selected_checkpoint,
        test,
        loss_curve,
        train_mirror_calls,
        eval_mirror_calls,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        files.extend(write_run_outputs(&record, o)?);
    }
    Ok(TrainOutcome { record, model: pair.model, files })
}

/// `run_record.json`, test metrics and the validation curve.
pub fn write_run_outputs(record: &RunRecord, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rec = out.join("run_record.json");
    std::fs::write(&rec, serde_json::to_vec_pretty(record)?).map_err(|e| Error::io(&rec, e))?;
    let csv = out.join("test_metrics.csv");
    record.test.write_csv(&csv)?;
    let json = out.join("test_metrics.json");
    record.test.write_json(&json)?;
    let pp = out.join("test_per_predicate.csv");
    record.test.write_per_predicate_csv(&pp, &record.partition)?;
    let curve = out.join("val_curve.csv");
    let mut w = csv::Writer::from_path(&curve).map_err(|e| Error::Checkpoint(format!("{}: {e}", curve.display())))?;
    w.write_record(["iteration", "l_original", "l_align", "l_final", "val_R@50", "val_mR@50"])?;
    for p in &record.eval_points {
        w.write_record([
            p.iteration.to_string(),
            format!("{:.6}", p.losses.l_original),
            format!("{:.6}", p.losses.l_align),
            format!("{:.6}", p.losses.l_final),
            format!("{:.6}", p.val.recall_at.get(&SELECTION_K).copied().unwrap_or(0.0)),
            format!("{:.6}", p.val.mean_recall(SELECTION_K).unwrap_or(0.0)),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&curve, e))?;
    Ok(vec![rec, csv, json, pp, curve])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, CorpusSpec};

    fn small() -> (CorpusMeta, Corpus) {
        let spec = CorpusSpec { n_train: 24, n_val: 8, n_test: 8, ..CorpusSpec::default() };
        let corpus = generate_corpus(&spec).unwrap();
        (CorpusMeta::from_corpus(&spec, &corpus).unwrap(), corpus)
    }

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig::new(ModelFamily::MiniMotifs);
        c.total_iterations = 6;
        c.eval_every = 3;
        c.batch_size = 4;
        c
    }

    #[test]
    fn runs_are_deterministic() {
        let (meta, corpus) = small();
        let a = run_training(&cfg(), &meta, &corpus, None).unwrap().record;
        let b = run_training(&cfg(), &meta, &corpus, None).unwrap().record;
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(a.eval_points.len(), 2);
        assert_eq!(a.eval_mirror_calls, 0);
        assert_eq!(a.train_mirror_calls, 6 * 4);
    }

    #[test]
    fn breakdown_follows_the_combined_objective() {
        let (meta, corpus) = small();
        let c = cfg();
        let pair = PredictorPair::new(build_model(&c, &meta), c.mask, c.align);
        let batch: Vec<&SceneSample> = corpus.train.iter().take(3).collect();
        let s = StepSettings { lr: 0.0, clip_norm: 5.0, seed: 0, iteration: 0, mode: EvalMode::PredCls, exec: Exec::Sequential };
        let (_, l) = batch_gradient(&pair, &batch, &s).unwrap();
        assert_eq!(l.l_final, l.l_original + c.align.lambda * l.l_align);
        assert!(l.l_align > 0.0);
    }

    #[test]
    fn selection_prefers_the_earliest_maximum() {
        let mk = |v: f64| {
            let mut r = EvalReport::from_matches(EvalMode::PredCls, &Default::default(), 3, &PartitionSpec { head: vec![], body: vec![], tail: vec![] });
            r.mean_recall_at.insert(SELECTION_K, v);
            EvalPoint { iteration: 0, losses: LossBreakdown::default(), val: r }
        };
        assert_eq!(select_best(&[mk(0.1), mk(0.3), mk(0.3), mk(0.2)]), 1);
    }

    #[test]
    fn parallel_and_sequential_gradients_agree() {
        let (meta, corpus) = small();
        let c = cfg();
        let pair = PredictorPair::new(build_model(&c, &meta), c.mask, c.align);
        let batch: Vec<&SceneSample> = corpus.train.iter().take(4).collect();
        let mut s = StepSettings { lr: 0.0, clip_norm: 5.0, seed: 0, iteration: 2, mode: EvalMode::PredCls, exec: Exec::Sequential };
        let (gs, ls) = batch_gradient(&pair, &batch, &s).unwrap();
        s.exec = Exec::Parallel;
        let (gp, lp) = batch_gradient(&pair, &batch, &s).unwrap();
        assert_eq!(ls, lp);
        for id in pair.store().ids() {
            assert_eq!(gs.get(id), gp.get(id));
        }
    }
}
