//! Layers built on the autograd tape. Layers only hold parameter ids; values
//! live in a [`ParamStore`].

use ndarray::Array2;
use rand::Rng as _;

use crate::autograd::{Graph, Var};
use crate::masking::EntryMask;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), group, d_in, d_out, rng);
        let bias = store.add_zeros(format!("{name}.bias"), group, 1, d_out);
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i < last {
                x = g.relu(x);
            }
        }
        x
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.ids()).collect()
    }
}

/// Single-direction LSTM over a `T × d_in` sequence, zero initial state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        let w_input = store.add_glorot(format!("{name}.w_input"), group, d_in, 4 * hidden, rng);
        let w_hidden = store.add_glorot(format!("{name}.w_hidden"), group, hidden, 4 * hidden, rng);
        // forget-gate bias starts at 1
        let mut b = Array2::zeros((1, 4 * hidden));
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let bias = store.add(format!("{name}.bias"), group, b);
        Lstm { w_input, w_hidden, bias, hidden }
    }

    /// Returns the `T × hidden` sequence of hidden states, visiting rows in
    /// `order`; output row `order[t]` holds the state after step `t`.
    pub fn forward(&self, g: &mut Graph, x: Var, order: &[usize]) -> Var {
        let hd = self.hidden;
        let wi = g.param(self.w_input);
        let wh = g.param(self.w_hidden);
        let b = g.param(self.bias);
        let xi = g.matmul(x, wi);
        let xi = g.add_row(xi, b);
        let mut h: Option<Var> = None;
        let mut c: Option<Var> = None;
        let mut outs = vec![None; order.len()];
        for &t in order {
            let mut gates = g.slice_rows(xi, t, t + 1);
            if let Some(h) = h {
                let hh = g.matmul(h, wh);
                gates = g.add(gates, hh);
            }
            let i_pre = g.slice_cols(gates, 0, hd);
            let f_pre = g.slice_cols(gates, hd, 2 * hd);
            let o_pre = g.slice_cols(gates, 2 * hd, 3 * hd);
            let c_pre = g.slice_cols(gates, 3 * hd, 4 * hd);
            let i = g.sigmoid(i_pre);
            let o = g.sigmoid(o_pre);
            let cand = g.tanh(c_pre);
            let ic = g.mul(i, cand);
            let c_new = match c {
                Some(c) => {
                    let f = g.sigmoid(f_pre);
                    let fc = g.mul(f, c);
                    g.add(fc, ic)
                }
                None => ic,
            };
            let tc = g.tanh(c_new);
            let h_new = g.mul(o, tc);
            outs[t] = Some(h_new);
            h = Some(h_new);
            c = Some(c_new);
        }
        let rows: Vec<Var> = outs.into_iter().map(|v| v.expect("order is a permutation")).collect();
        g.concat_rows(&rows)
    }

    pub fn ids(&self) -> [ParamId; 3] {
        [self.w_input, self.w_hidden, self.bias]
    }
}

/// Forward and backward LSTMs over the same ordering, outputs concatenated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    /// `out_width` is split evenly between the two directions.
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d_in: usize, out_width: usize, rng: &mut Rng) -> Self {
        assert!(out_width % 2 == 0);
        BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), group, d_in, out_width / 2, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), group, d_in, out_width / 2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, order: &[usize]) -> Var {
        let f = self.fwd.forward(g, x, order);
        let rev: Vec<usize> = order.iter().rev().copied().collect();
        let b = self.bwd.forward(g, x, &rev);
        g.concat_cols(&[f, b])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fwd.ids().into_iter().chain(self.bwd.ids()).collect()
    }
}

/// Dropout state for one forward pass. `None` disables it.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let rate = self.rate;
        match &mut self.rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let m = Array2::from_shape_simple_fn(g.shape(x), || if rng.random::<f64>() < rate { 0.0 } else { keep });
                g.mul_const(x, m)
            }
            _ => x,
        }
    }
}

/// Multi-head scaled dot-product attention with an optional logit mask that
/// is shared by every head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, heads: usize, rng: &mut Rng) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        Attention {
            q: Linear::new(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), group, d, d, rng),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var, mask: Option<&EntryMask>, dropout: &mut Dropout) -> Var {
        let d = self.q.d_out;
        let dh = d / self.heads;
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
            let scores = g.matmul_nt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                debug_assert_eq!((m.rows, m.cols), g.shape(scores));
                if !m.is_empty() {
                    scores = g.mask_fill(scores, m.masked.clone());
                }
            }
            let attn = g.softmax(scores);
            let attn = dropout.apply(g, attn);
            outs.push(g.matmul(attn, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.o.forward(g, cat)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.ids()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), group, d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: &mut Dropout) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        let h = dropout.apply(g, h);
        self.down.forward(g, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.up.ids().into_iter().chain(self.down.ids()).collect()
    }
}

/// `layer_norm(x + dropout(sub))`.
pub fn residual_norm(g: &mut Graph, x: Var, sub: Var, dropout: &mut Dropout) -> Var {
    let sub = dropout.apply(g, sub);
    let s = g.add(x, sub);
    g.layer_norm(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn lstm_output_shape_and_order() {
        let mut rng = rng_for(0, &[]);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "l", ParamGroup::RelationPredictor, 3, 8, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.1));
        let y = lstm.forward(&mut g, x, &[2, 0, 3, 1]);
        assert_eq!(g.shape(y), (4, 8));
        assert!(g.value(y).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn attention_mask_matches_value_level_masking() {
        let mut rng = rng_for(1, &[]);
        let mut store = ParamStore::new();
        let att = Attention::new(&mut store, "a", ParamGroup::RelationPredictor, 4, 1, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(Array2::from_shape_fn((2, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let mem = g.constant(Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.2));
        let mask = EntryMask { rows: 2, cols: 3, masked: vec![true, true, false, false, false, false], fallback_rows: vec![] };
        let masked = att.forward(&mut g, q, mem, Some(&mask), &mut Dropout::off());
        // row 0 attends only to memory row 2: output = o(v(mem[2]))
        let m2 = g.slice_rows(mem, 2, 3);
        let v2 = att.v.forward(&mut g, m2);
        let expect = att.o.forward(&mut g, v2);
        let a = g.value(masked).row(0).to_owned();
        let b = g.value(expect).row(0).to_owned();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
