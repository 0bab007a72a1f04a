//! Optimizers, learning-rate schedule and gradient clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::params::{Grads, Mat, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Heavy-ball SGD; weight decay is added to the gradient.
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerConfig {
    pub fn sgd_default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9, weight_decay: 1e-4 }
    }

    pub fn adamw_default() -> Self {
        OptimizerConfig::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Cosine annealing from `base_lr` at step 0 down to 0 at `total` steps.
pub fn cosine_lr(base_lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Option<Mat>>,
    second: Vec<Option<Mat>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        Optimizer { config, first: vec![None; store.len()], second: vec![None; store.len()], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every non-frozen parameter that has a gradient entry.
    ///
    /// Parameters without a gradient are left untouched, including weight
    /// decay, so a head that no loss reaches stays bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        for (id, g) in grads.iter() {
            if store.entry(id).frozen {
                continue;
            }
            let w = store.get_mut(id);
            match self.config {
                OptimizerConfig::Sgd { momentum, weight_decay } => {
                    let d = g + &(&*w * weight_decay);
                    let buf = self.first[id.0].get_or_insert_with(|| Array2::zeros(d.dim()));
                    if t == 1 {
                        buf.assign(&d);
                    } else {
                        buf.zip_mut_with(&d, |b, &dv| *b = momentum * *b + dv);
                    }
                    w.zip_mut_with(buf, |wv, &b| *wv -= lr * b);
                }
                OptimizerConfig::AdamW { beta1, beta2, eps, weight_decay } => {
                    let m = self.first[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
                    m.zip_mut_with(g, |mv, &gv| *mv = beta1 * *mv + (1.0 - beta1) * gv);
                    let v = self.second[id.0].get_or_insert_with(|| Array2::zeros(g.dim()));
                    v.zip_mut_with(g, |vv, &gv| *vv = beta2 * *vv + (1.0 - beta2) * gv * gv);
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let m = self.first[id.0].as_ref().expect("set above");
                    let v = self.second[id.0].as_ref().expect("set above");
                    ndarray::Zip::from(w).and(m).and(v).for_each(|wv, &mv, &vv| {
                        *wv -= lr * weight_decay * *wv;
                        *wv -= lr * (mv / bc1) / ((vv / bc2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamId};
    use ndarray::array;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
        assert!(cosine_lr(0.1, 30, 100) > cosine_lr(0.1, 31, 100));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = Grads::with_len(1);
        g.accumulate(ParamId(0), &array![[3.0, 4.0]]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
        let mut small = Grads::with_len(1);
        small.accumulate(ParamId(0), &array![[0.3, 0.4]]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.get(ParamId(0)).unwrap(), &array![[0.3, 0.4]]);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::RelationPredictor, array![[1.0]]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.5, weight_decay: 0.0 }, &store);
        let mut g = Grads::with_len(1);
        g.accumulate(id, &array![[2.0]]);
        opt.step(&mut store, &g, 0.1);
        assert!((store.get(id)[[0, 0]] - 0.8).abs() < 1e-15);
        opt.step(&mut store, &g, 0.1);
        // buf = 0.5 * 2 + 2 = 3
        assert!((store.get(id)[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn untouched_and_frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::RelationPredictor, array![[1.0]]);
        let b = store.add("b", ParamGroup::UntiedHead, array![[1.0]]);
        let c = store.add("c", ParamGroup::Detector, array![[1.0]]);
        store.freeze_group(ParamGroup::Detector);
        let mut opt = Optimizer::new(OptimizerConfig::adamw_default(), &store);
        let mut g = Grads::with_len(3);
        g.accumulate(a, &array![[1.0]]);
        g.accumulate(c, &array![[1.0]]);
        opt.step(&mut store, &g, 0.01);
        assert!(store.get(a)[[0, 0]] < 1.0);
        assert_eq!(store.get(b)[[0, 0]], 1.0);
        assert_eq!(store.get(c)[[0, 0]], 1.0);
    }
}
