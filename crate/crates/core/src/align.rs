//! Alignment objective between the original and mirrored relation predictors.
//!
//! The mirrored branch's predicate distributions are pulled toward the
//! original branch's with `KL(P_original ‖ P_masked)`, averaged over every
//! candidate relation (background-labelled ones included). The target side is
//! an [`AlignTarget`], which holds plain values and therefore cannot carry a
//! gradient. The final objective is `L_original + λ · L_align`.

use serde::{Deserialize, Serialize};

use crate::autograd::{kl_rows_mean, Graph, Var, KL_FLOOR};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::types::PredicateDistribution;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_MASK_P: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// KL toward the original branch (SSA).
    SelfSupervised,
    /// Cross-entropy toward ground truth in the mirrored branch (SA).
    Supervised,
    /// No mirrored branch at all.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Untied,
    Tied,
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssa" | "self_supervised" => Ok(TargetMode::SelfSupervised),
            "sa" | "supervised" => Ok(TargetMode::Supervised),
            "off" => Ok(TargetMode::Off),
            _ => Err(Error::InvalidConfig(format!("unknown alignment mode {s}"))),
        }
    }
}

impl std::str::FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "untied" | "uph" => Ok(HeadMode::Untied),
            "tied" | "ph" => Ok(HeadMode::Tied),
            _ => Err(Error::InvalidConfig(format!("unknown head mode {s}"))),
        }
    }
}

impl TargetMode {
    pub fn short(self) -> &'static str {
        match self {
            TargetMode::SelfSupervised => "SSA",
            TargetMode::Supervised => "SA",
            TargetMode::Off => "off",
        }
    }
}

impl HeadMode {
    pub fn short(self) -> &'static str {
        match self {
            HeadMode::Untied => "UPH",
            HeadMode::Tied => "PH",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub lambda: f64,
    pub p: f64,
    pub target_mode: TargetMode,
    pub head_mode: HeadMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { lambda: DEFAULT_LAMBDA, p: DEFAULT_MASK_P, target_mode: TargetMode::SelfSupervised, head_mode: HeadMode::Untied }
    }
}

impl AlignConfig {
    pub fn off() -> Self {
        AlignConfig { target_mode: TargetMode::Off, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("masking probability {} outside [0, 1]", self.p)));
        }
        Ok(())
    }

    pub fn uses_mirror(&self) -> bool {
        self.target_mode != TargetMode::Off
    }
}

/// Detached predictions of the original branch, used as the KL target.
///
/// Rows are distributions. For the query-based model the subject and object
/// label distributions travel alongside the relation ones.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTarget {
    pub relation: Mat,
    pub subject: Option<Mat>,
    pub object: Option<Mat>,
}

impl AlignTarget {
    pub fn relation_only(relation: Mat) -> Self {
        AlignTarget { relation, subject: None, object: None }
    }

    pub fn from_distributions(dists: &[PredicateDistribution]) -> Result<Self> {
        Ok(AlignTarget::relation_only(stack(dists)?))
    }

    pub fn relation_distributions(&self) -> Vec<PredicateDistribution> {
        rows_to_distributions(&self.relation)
    }
}

fn stack(dists: &[PredicateDistribution]) -> Result<Mat> {
    let c = dists.first().map_or(0, |d| d.len());
    if dists.iter().any(|d| d.len() != c) {
        return Err(Error::InvalidConfig("distributions differ in class count".into()));
    }
    Ok(Mat::from_shape_fn((dists.len(), c), |(i, j)| dists[i].probs()[j]))
}

pub fn rows_to_distributions(m: &Mat) -> Vec<PredicateDistribution> {
    m.rows()
        .into_iter()
        .map(|r| PredicateDistribution::new(r.to_vec()).expect("softmax rows are distributions"))
        .collect()
}

/// Mean over relations of `KL(target ‖ masked)`; masked probabilities are
/// floored at `1e-12` and `0 · ln 0` counts as 0.
pub fn kl_alignment_loss(target: &AlignTarget, masked: &[PredicateDistribution]) -> Result<f64> {
    if target.relation.nrows() != masked.len() {
        return Err(Error::LengthMismatch(target.relation.nrows(), masked.len()));
    }
    let m = stack(masked)?;
    if m.ncols() != target.relation.ncols() {
        return Err(Error::InvalidConfig("class counts differ between target and prediction".into()));
    }
    Ok(kl_rows_mean(&target.relation, &m))
}

/// Graph form of [`kl_alignment_loss`]; gradient flows only into `masked_probs`.
pub fn kl_alignment_term(g: &mut Graph, target: &Mat, masked_probs: Var) -> Var {
    assert_eq!(g.shape(masked_probs), target.dim(), "target and prediction shapes differ");
    g.kl(target.clone(), masked_probs)
}

pub fn combine_losses(l_original: f64, l_align: f64, cfg: &AlignConfig) -> f64 {
    match cfg.target_mode {
        TargetMode::Off => l_original,
        _ => l_original + cfg.lambda * l_align,
    }
}

/// Cross-entropy of mirrored predictions against one-hot labels, mean over rows.
pub fn supervised_alignment_loss(labels: &[usize], masked: &[PredicateDistribution]) -> Result<f64> {
    if labels.len() != masked.len() {
        return Err(Error::LengthMismatch(labels.len(), masked.len()));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&y, d) in labels.iter().zip(masked) {
        let p = *d.probs().get(y).ok_or_else(|| Error::InvalidConfig(format!("label {y} out of range")))?;
        total -= p.max(KL_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Projection used by the mirrored branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProjectionHead {
    Linear(Linear),
    Mlp(Mlp),
}

impl ProjectionHead {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        match self {
            ProjectionHead::Linear(l) => l.forward(g, x),
            ProjectionHead::Mlp(m) => m.forward(g, x),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            ProjectionHead::Linear(l) => l.ids().to_vec(),
            ProjectionHead::Mlp(m) => m.ids(),
        }
    }
}

/// Head of the mirrored branch: its own parameters, or the original head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MirrorHead {
    Tied,
    Untied(ProjectionHead),
}

impl MirrorHead {
    pub fn ids(&self) -> Vec<ParamId> {
        match self {
            MirrorHead::Tied => Vec::new(),
            MirrorHead::Untied(h) => h.ids(),
        }
    }
}

/// Builds the mirrored head. `widths` is the layer stack of a fresh head:
/// two entries give a single linear layer, more give a ReLU MLP. In tied mode
/// nothing is allocated and the caller reuses its original head.
pub fn build_untied_head(store: &mut ParamStore, name: &str, widths: &[usize], mode: HeadMode, rng: &mut Rng) -> MirrorHead {
    match mode {
        HeadMode::Tied => MirrorHead::Tied,
        HeadMode::Untied if widths.len() == 2 => {
            MirrorHead::Untied(ProjectionHead::Linear(Linear::new(store, name, ParamGroup::UntiedHead, widths[0], widths[1], rng)))
        }
        HeadMode::Untied => MirrorHead::Untied(ProjectionHead::Mlp(Mlp::new(store, name, ParamGroup::UntiedHead, widths, rng))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{Optimizer, OptimizerConfig};
    use crate::params::Grads;
    use crate::rng::rng_for;
    use ndarray::array;

    fn d(p: &[f64]) -> PredicateDistribution {
        PredicateDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let t = AlignTarget::from_distributions(&[d(&[0.5, 0.5])]).unwrap();
        assert_eq!(kl_alignment_loss(&t, &[d(&[0.5, 0.5])]).unwrap(), 0.0);
    }

    #[test]
    fn kl_closed_forms() {
        let t = AlignTarget::from_distributions(&[d(&[1.0, 0.0])]).unwrap();
        let v = kl_alignment_loss(&t, &[d(&[0.5, 0.5])]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let t = AlignTarget::from_distributions(&[d(&[0.5, 0.5])]).unwrap();
        let v = kl_alignment_loss(&t, &[d(&[0.25, 0.75])]).unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_floors_zero_masked_probabilities() {
        let t = AlignTarget::from_distributions(&[d(&[0.5, 0.5])]).unwrap();
        let v = kl_alignment_loss(&t, &[d(&[1.0, 0.0])]).unwrap();
        assert!((v - (0.5 * 0.5f64.ln() + 0.5 * (0.5f64.ln() - KL_FLOOR.ln()))).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_length_mismatch() {
        let t = AlignTarget::from_distributions(&[d(&[0.5, 0.5])]).unwrap();
        assert!(matches!(kl_alignment_loss(&t, &[]), Err(Error::LengthMismatch(1, 0))));
    }

    #[test]
    fn combine_follows_the_weighted_sum() {
        let mut cfg = AlignConfig { lambda: 0.0, ..AlignConfig::default() };
        assert_eq!(combine_losses(2.0, 0.7, &cfg), 2.0);
        cfg.lambda = 10.0;
        assert_eq!(combine_losses(2.0, 0.1, &cfg), 3.0);
        cfg.lambda = 1.0;
        assert_eq!(combine_losses(2.5, 0.0, &cfg), 2.5);
        assert_eq!(combine_losses(2.5, 9.0, &AlignConfig::off()), 2.5);
    }

    #[test]
    fn supervised_alignment_closed_forms() {
        assert!(supervised_alignment_loss(&[1], &[d(&[0.0, 1.0])]).unwrap().abs() < 1e-15);
        let u = supervised_alignment_loss(&[2, 0], &[PredicateDistribution::uniform(5), PredicateDistribution::uniform(5)]).unwrap();
        assert!((u - 5f64.ln()).abs() < 1e-15);
        let v = supervised_alignment_loss(&[1], &[d(&[0.25, 0.75])]).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-15);
        assert!((v - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn untied_heads_are_disjoint_and_tied_heads_allocate_nothing() {
        let mut rng = rng_for(0, &[]);
        let mut store = ParamStore::new();
        let original = Linear::new(&mut store, "head", ParamGroup::OriginalHead, 4, 3, &mut rng);
        let before = store.len();
        let untied = build_untied_head(&mut store, "mirror", &[4, 3], HeadMode::Untied, &mut rng);
        let ids = untied.ids();
        assert_eq!(ids.len(), 2);
        assert!(ids.iter().all(|id| !original.ids().contains(id)));
        assert!(ids.iter().all(|&id| store.group_of(id) == ParamGroup::UntiedHead));
        assert_eq!(store.len(), before + 2);
        let tied = build_untied_head(&mut store, "mirror_tied", &[4, 3], HeadMode::Tied, &mut rng);
        assert_eq!(tied, MirrorHead::Tied);
        assert_eq!(store.len(), before + 2);
        let mlp = build_untied_head(&mut store, "mlp", &[6, 5, 5, 3], HeadMode::Untied, &mut rng);
        assert_eq!(mlp.ids().len(), 6);
    }

    #[test]
    fn original_loss_step_leaves_untied_head_unchanged() {
        let mut rng = rng_for(1, &[]);
        let mut store = ParamStore::new();
        let original = Linear::new(&mut store, "head", ParamGroup::OriginalHead, 2, 2, &mut rng);
        let MirrorHead::Untied(untied) = build_untied_head(&mut store, "m", &[2, 2], HeadMode::Untied, &mut rng) else {
            unreachable!()
        };
        let snapshot: Vec<Mat> = untied.ids().iter().map(|&id| store.get(id).clone()).collect();
        let grads: Grads = {
            let mut g = Graph::new(&store);
            let x = g.constant(array![[1.0, -1.0]]);
            let y = original.forward(&mut g, x);
            let lp = g.log_softmax(y);
            let l = g.nll(lp, &[1], &[1.0], 1.0);
            g.backward(l)
        };
        Optimizer::new(OptimizerConfig::sgd_default(), &store).step(&mut store, &grads, 0.1);
        for (id, before) in untied.ids().iter().zip(snapshot) {
            assert_eq!(store.get(*id), &before);
        }
    }
}
