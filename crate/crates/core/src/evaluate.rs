//! Split-level evaluation of the original branch.

use std::collections::BTreeMap;

use crate::datagen::PartitionSpec;
use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::metrics::{gt_triplets, match_triplets, rank_triplets, EvalReport, ImageMatches, IOU_THRESHOLD};
use crate::models::{EvalMode, SceneGraphModel};
use crate::types::SceneSample;

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub mode: EvalMode,
    pub ks: &'a [usize],
    pub graph_constraint: bool,
    pub num_predicates: usize,
    pub partition: &'a PartitionSpec,
    pub exec: Exec,
}

/// Per-image matches at every requested K. Images are scored independently
/// (in parallel when enabled) and collected in input order.
pub fn image_matches<M: SceneGraphModel + ?Sized>(model: &M, samples: &[SceneSample], opts: &EvalOptions) -> Result<BTreeMap<usize, Vec<ImageMatches>>> {
    if !model.supports(opts.mode) {
        return Err(Error::UnsupportedMode { family: model.family().name().into(), mode: opts.mode.name().into() });
    }
    if let Some(&k) = opts.ks.iter().find(|&&k| k == 0) {
        return Err(Error::InvalidK(k as i64));
    }
    let per_image: Vec<Result<Vec<ImageMatches>>> = exec::map(opts.exec, samples, |s| {
        let pred = model.predict(s, opts.mode)?;
        let ranked = rank_triplets(&pred, opts.graph_constraint);
        let gt = gt_triplets(s);
        opts.ks
            .iter()
            .map(|&k| Ok(ImageMatches::new(&gt, &match_triplets(&ranked, &gt, opts.mode, k as i64, IOU_THRESHOLD)?)))
            .collect()
    });
    let mut out: BTreeMap<usize, Vec<ImageMatches>> = opts.ks.iter().map(|&k| (k, Vec::with_capacity(samples.len()))).collect();
    for r in per_image {
        for (&k, m) in opts.ks.iter().zip(r?) {
            out.get_mut(&k).expect("inserted above").push(m);
        }
    }
    Ok(out)
}

pub fn evaluate<M: SceneGraphModel + ?Sized>(model: &M, samples: &[SceneSample], opts: &EvalOptions) -> Result<EvalReport> {
    let per_k = image_matches(model, samples, opts)?;
    Ok(EvalReport::from_matches(opts.mode, &per_k, opts.num_predicates, opts.partition))
}
