//! Toy relation-prediction architectures and the predictor pair around them.
//!
//! Both families keep every parameter in one [`ParamStore`]. The mirrored
//! branch reads the same parameter ids as the original branch, so weight
//! tying is a property of construction: there is no second copy to drift.
//! Only the mirrored heads ([`ParamGroup::UntiedHead`]) are separate.

pub mod detector;
pub mod motifs;
pub mod sgtr;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::MaskConfig;
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::types::{BoundingBox, SceneSample};

pub use motifs::{MiniMotifs, MotifsDims};
pub use sgtr::{MiniSgtr, SgtrDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    MiniSgtr,
    MiniMotifs,
}

impl ModelFamily {
    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::MiniSgtr => "mini_sgtr",
            ModelFamily::MiniMotifs => "mini_motifs",
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            ModelFamily::MiniSgtr => "SGTR",
            ModelFamily::MiniMotifs => "Motifs",
        }
    }
}

impl std::str::FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_sgtr" | "mini-sgtr" | "sgtr" => Ok(ModelFamily::MiniSgtr),
            "mini_motifs" | "mini-motifs" | "motifs" => Ok(ModelFamily::MiniMotifs),
            _ => Err(Error::InvalidConfig(format!("unknown model family {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    PredCls,
    SgCls,
    SgDet,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::PredCls => "predcls",
            EvalMode::SgCls => "sgcls",
            EvalMode::SgDet => "sgdet",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(EvalMode::PredCls),
            "sgcls" => Ok(EvalMode::SgCls),
            "sgdet" => Ok(EvalMode::SgDet),
            _ => Err(Error::InvalidConfig(format!("unknown mode {s}"))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An entity as predicted (or given) at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct PredEntity {
    pub class_id: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Predicate distribution for one ordered entity pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub subject: usize,
    pub object: usize,
    /// Full distribution, background at index 0.
    pub probs: Vec<f64>,
}

/// Everything the metrics need from one forward pass on one scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenePrediction {
    pub entities: Vec<PredEntity>,
    pub pairs: Vec<PairPrediction>,
}

/// Randomness and settings for one training forward.
pub struct StepCtx<'r> {
    pub align: AlignConfig,
    pub mode: EvalMode,
    pub dropout_rng: &'r mut Rng,
    pub mask_rng: &'r mut Rng,
}

/// Loss nodes of one training forward.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub original: Var,
    pub align: Option<Var>,
    pub total: Var,
}

/// `original + λ · align` in the graph, or `original` alone when alignment is off.
pub fn combine_in_graph(g: &mut Graph, original: Var, align: Option<Var>, cfg: &AlignConfig) -> LossVars {
    match align {
        Some(a) if cfg.uses_mirror() => {
            let scaled = g.scale(a, cfg.lambda);
            let total = g.add(original, scaled);
            LossVars { original, align: Some(a), total }
        }
        _ => LossVars { original, align: None, total: original },
    }
}

pub trait SceneGraphModel: Sync + Send {
    fn family(&self) -> ModelFamily;

    fn store(&self) -> &ParamStore;

    fn store_mut(&mut self) -> &mut ParamStore;

    fn supports(&self, mode: EvalMode) -> bool;

    /// Inference with the original branch only.
    fn predict(&self, sample: &SceneSample, mode: EvalMode) -> Result<ScenePrediction>;

    /// Builds the training loss for one sample into `g`.
    fn sample_loss<'s>(
        &'s self,
        g: &mut Graph<'s>,
        sample: &SceneSample,
        ctx: &mut StepCtx,
        mirror_calls: &AtomicUsize,
    ) -> Result<LossVars>;
}

/// A model together with its masking/alignment settings and a counter of
/// mirrored-branch invocations.
pub struct PredictorPair<M> {
    pub model: M,
    pub mask_cfg: MaskConfig,
    pub align_cfg: AlignConfig,
    mirror_calls: AtomicUsize,
}

impl<M: SceneGraphModel> PredictorPair<M> {
    pub fn new(model: M, mask_cfg: MaskConfig, align_cfg: AlignConfig) -> Self {
        PredictorPair { model, mask_cfg, align_cfg, mirror_calls: AtomicUsize::new(0) }
    }

    pub fn mirror_calls(&self) -> usize {
        self.mirror_calls.load(Ordering::SeqCst)
    }

    pub fn mirror_counter(&self) -> &AtomicUsize {
        &self.mirror_calls
    }

    pub fn store(&self) -> &ParamStore {
        self.model.store()
    }

    /// Parameters the mirrored branch shares with the original branch.
    pub fn shared_groups() -> [ParamGroup; 1] {
        [ParamGroup::RelationPredictor]
    }
}

/// Either model family behind one type.
pub enum AnyModel {
    Sgtr(MiniSgtr),
    Motifs(MiniMotifs),
}

impl AnyModel {
    fn inner(&self) -> &dyn SceneGraphModel {
        match self {
            AnyModel::Sgtr(m) => m,
            AnyModel::Motifs(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn SceneGraphModel {
        match self {
            AnyModel::Sgtr(m) => m,
            AnyModel::Motifs(m) => m,
        }
    }
}

impl SceneGraphModel for AnyModel {
    fn family(&self) -> ModelFamily {
        self.inner().family()
    }

    fn store(&self) -> &ParamStore {
        self.inner().store()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.inner_mut().store_mut()
    }

    fn supports(&self, mode: EvalMode) -> bool {
        self.inner().supports(mode)
    }

    fn predict(&self, sample: &SceneSample, mode: EvalMode) -> Result<ScenePrediction> {
        self.inner().predict(sample, mode)
    }

    fn sample_loss<'s>(&'s self, g: &mut Graph<'s>, sample: &SceneSample, ctx: &mut StepCtx, mirror_calls: &AtomicUsize) -> Result<LossVars> {
        match self {
            AnyModel::Sgtr(m) => m.sample_loss(g, sample, ctx, mirror_calls),
            AnyModel::Motifs(m) => m.sample_loss(g, sample, ctx, mirror_calls),
        }
    }
}

pub(crate) fn bump(counter: &AtomicUsize) {
    counter.fetch_add(1, Ordering::SeqCst);
}

/// Row-major `(cx, cy, w, h)` of a box.
pub fn box_cxcywh(b: &BoundingBox) -> [f64; 4] {
    [(b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0, b.x_max - b.x_min, b.y_max - b.y_min]
}

/// Box from predicted `(cx, cy, w, h)` clamped into the unit square.
pub fn box_from_cxcywh(v: &[f64]) -> BoundingBox {
    let w = v[2].max(1e-3);
    let h = v[3].max(1e-3);
    let x0 = (v[0] - w / 2.0).clamp(0.0, 1.0 - 1e-3);
    let y0 = (v[1] - h / 2.0).clamp(0.0, 1.0 - 1e-3);
    let x1 = (v[0] + w / 2.0).clamp(x0 + 1e-3, 1.0);
    let y1 = (v[1] + h / 2.0).clamp(y0 + 1e-3, 1.0);
    BoundingBox::new(x0, y0, x1, y1)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy bipartite assignment on a `rows × cols` cost matrix: repeatedly takes
/// the cheapest remaining pair (ties by row, then column). Returns
/// `assignment[row] = Some(col)`.
pub(crate) fn greedy_assign(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    let mut cells: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * cols);
    for (r, row) in cost.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            cells.push((v, r, c));
        }
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; rows];
    let mut col_taken = vec![false; cols];
    let mut left = rows.min(cols);
    for (_, r, c) in cells {
        if left == 0 {
            break;
        }
        if out[r].is_none() && !col_taken[c] {
            out[r] = Some(c);
            col_taken[c] = true;
            left -= 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_assignment_takes_cheapest_first() {
        let cost = vec![vec![1.0, 0.5], vec![0.2, 3.0], vec![0.1, 0.4]];
        assert_eq!(greedy_assign(&cost), vec![Some(1), None, Some(0)]);
    }

    #[test]
    fn box_conversion_round_trips_inside_the_unit_square() {
        let b = BoundingBox::new(0.25, 0.125, 0.5, 0.75);
        let back = box_from_cxcywh(&box_cxcywh(&b));
        assert!((back.x_min - b.x_min).abs() < 1e-12 && (back.y_max - b.y_max).abs() < 1e-12);
        assert!(box_from_cxcywh(&[0.0, 1.0, 0.5, 0.5]).is_valid());
    }
}
