//! Random masking for the mirrored branch.
//!
//! Two granularities:
//! * [`mask_features`] zeroes whole rows of an `N × d` relation feature
//!   matrix, each independently with probability `p`, without rescaling;
//! * [`mask_attention_logits`] sets individual attention logits to `-inf`
//!   before the softmax, each independently with probability `p`. A row whose
//!   entries would all be masked is left untouched.
//!
//! Both consume the caller's RNG, one uniform draw per row or entry, in
//! row-major order.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::RelationFeatureBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub p: f64,
    pub seed: u64,
    /// Always false: masked rows are zeroed, survivors are not scaled up.
    pub rescale: bool,
}

impl MaskConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        let cfg = MaskConfig { p, seed, rescale: false };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidConfig(format!("masking probability {} outside [0, 1]", self.p)));
        }
        if self.rescale {
            return Err(Error::InvalidConfig("rescaled masking is not supported".into()));
        }
        Ok(())
    }
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { p: 0.1, seed: 0, rescale: false }
    }
}

#[inline]
fn bernoulli(rng: &mut Rng, p: f64) -> bool {
    // random() is in [0, 1): p = 0 never fires, p = 1 always does
    rng.random::<f64>() < p
}

/// `true` marks a row to be zeroed.
pub fn draw_row_mask(n: usize, p: f64, rng: &mut Rng) -> Vec<bool> {
    (0..n).map(|_| bernoulli(rng, p)).collect()
}

/// Per-entry mask for an `m × l` logit matrix, `true` = set to `-inf`.
///
/// Rows that come out fully masked are cleared (fallback rule).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
    /// Rows where the fallback fired.
    pub fallback_rows: Vec<usize>,
}

impl EntryMask {
    pub fn is_empty(&self) -> bool {
        !self.masked.iter().any(|&m| m)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.masked[r * self.cols + c]
    }
}

pub fn draw_entry_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> EntryMask {
    let mut masked: Vec<bool> = (0..rows * cols).map(|_| bernoulli(rng, p)).collect();
    let mut fallback_rows = Vec::new();
    if cols > 0 {
        for (r, row) in masked.chunks_mut(cols).enumerate() {
            if row.iter().all(|&m| m) {
                row.iter_mut().for_each(|m| *m = false);
                fallback_rows.push(r);
            }
        }
    }
    EntryMask { rows, cols, masked, fallback_rows }
}

pub fn apply_row_mask(features: &Array2<f64>, mask: &[bool]) -> Array2<f64> {
    let mut out = features.clone();
    for (mut row, &m) in out.rows_mut().into_iter().zip(mask) {
        if m {
            row.fill(0.0);
        }
    }
    out
}

pub fn mask_features(batch: &RelationFeatureBatch, cfg: &MaskConfig, rng: &mut Rng) -> RelationFeatureBatch {
    let mask = draw_row_mask(batch.features().nrows(), cfg.p, rng);
    RelationFeatureBatch::new(apply_row_mask(batch.features(), &mask)).expect("masking keeps rows finite")
}

pub fn apply_entry_mask(scores: &Array2<f64>, mask: &EntryMask) -> Array2<f64> {
    let mut out = scores.clone();
    for ((r, c), v) in out.indexed_iter_mut() {
        if mask.get(r, c) {
            *v = f64::NEG_INFINITY;
        }
    }
    out
}

pub fn mask_attention_logits(scores: &Array2<f64>, cfg: &MaskConfig, rng: &mut Rng) -> Array2<f64> {
    let mask = draw_entry_mask(scores.nrows(), scores.ncols(), cfg.p, rng);
    apply_entry_mask(scores, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use ndarray::array;
    use proptest::prelude::*;

    fn batch(n: usize, d: usize) -> RelationFeatureBatch {
        RelationFeatureBatch::new(Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64 * 0.37 - 1.1)).unwrap()
    }

    #[test]
    fn p_zero_is_identity_and_p_one_zeroes() {
        let b = batch(50, 4);
        let mut rng = rng_for(1, &[]);
        assert_eq!(&mask_features(&b, &MaskConfig::new(0.0, 0).unwrap(), &mut rng), &b);
        let z = mask_features(&b, &MaskConfig::new(1.0, 0).unwrap(), &mut rng);
        assert!(z.features().iter().all(|&v| v == 0.0));
        assert_eq!(z.features().dim(), (50, 4));
    }

    #[test]
    fn attention_p_zero_is_identity() {
        let s = Array2::from_shape_fn((3, 5), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let mut rng = rng_for(2, &[]);
        assert_eq!(mask_attention_logits(&s, &MaskConfig::new(0.0, 0).unwrap(), &mut rng), s);
    }

    #[test]
    fn attention_p_one_falls_back_everywhere() {
        let s = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let mut rng = rng_for(3, &[]);
        let m = draw_entry_mask(4, 3, 1.0, &mut rng);
        assert_eq!(m.fallback_rows, vec![0, 1, 2, 3]);
        assert_eq!(apply_entry_mask(&s, &m), s);
    }

    #[test]
    fn masked_logit_gets_zero_probability() {
        let row = array![[0.3, 1.2, -0.4]];
        let mask = EntryMask { rows: 1, cols: 3, masked: vec![false, true, false], fallback_rows: vec![] };
        let out = apply_entry_mask(&row, &mask);
        let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = out.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        assert_eq!(e[1] / z, 0.0);
        let ref_z = 0.3f64.exp() + (-0.4f64).exp();
        assert!((e[0] / z - 0.3f64.exp() / ref_z).abs() < 1e-15);
        assert!((e[2] / z - (-0.4f64).exp() / ref_z).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_p() {
        assert!(MaskConfig::new(1.5, 0).is_err());
        assert!(MaskConfig::new(-0.1, 0).is_err());
    }

    proptest! {
        #[test]
        fn unmasked_rows_are_bit_identical(seed in any::<u64>(), p in 0.0f64..1.0, n in 1usize..40) {
            let b = batch(n, 3);
            let cfg = MaskConfig::new(p, seed).unwrap();
            let mut r1 = rng_for(seed, &[]);
            let mut r2 = rng_for(seed, &[]);
            let out = mask_features(&b, &cfg, &mut r1);
            prop_assert_eq!(&out, &mask_features(&b, &cfg, &mut r2));
            for (o, i) in out.features().rows().into_iter().zip(b.features().rows()) {
                let zeroed = o.iter().all(|&v| v == 0.0);
                prop_assert!(zeroed || o == i);
            }
        }

        #[test]
        fn every_attention_row_keeps_a_finite_entry(seed in any::<u64>(), p in 0.0f64..=1.0, m in 1usize..8, l in 1usize..6) {
            let s = Array2::from_elem((m, l), 0.5);
            let mut rng = rng_for(seed, &[]);
            let out = mask_attention_logits(&s, &MaskConfig::new(p, 0).unwrap(), &mut rng);
            for row in out.rows() {
                prop_assert!(row.iter().any(|v| v.is_finite()));
            }
        }
    }
}
