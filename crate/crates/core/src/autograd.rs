//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! its value. [`Graph::backward`] walks the nodes in reverse and returns the
//! gradient of a scalar loss with respect to every parameter that was read
//! through [`Graph::param`]. Each parameter is loaded at most once per graph,
//! so a parameter used by two branches accumulates both contributions.
//!
//! Nodes created by [`Graph::constant`] or [`Graph::detach`] carry no
//! gradient. Backpropagation never enters a subgraph that cannot reach a
//! parameter, so parameters behind a detach receive no gradient at all, which
//! is an exact zero rather than a small number.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::{Grads, Mat, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Floor applied to masked-branch probabilities inside the KL loss.
pub const KL_FLOOR: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

enum Value {
    Owned(Mat),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Mat),
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskFill(Var, Vec<bool>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Gather(Var, Vec<usize>),
    LayerNorm(Var, Vec<f64>),
    MeanRows(Var),
    Sum(Var),
    Nll(Var, Vec<usize>, Vec<f64>, f64),
    Kl(Var, Mat),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    load_order: Vec<ParamId>,
    /// Values produced by `detach`, in call order.
    detached: Vec<Mat>,
    /// When set, the k-th `detach` returns `pinned[k]` instead of its input.
    pinned: Option<Vec<Mat>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::with_capacity(512), params: HashMap::new(), load_order: Vec::new(), detached: Vec::new(), pinned: None }
    }

    /// A graph whose stop-gradient values are fixed to those recorded by an
    /// earlier pass ([`Graph::detached_values`]). Finite differences taken
    /// through such graphs differentiate the same surrogate as `backward`:
    /// everything behind a detach is held constant.
    pub fn pinned(store: &'s ParamStore, values: Vec<Mat>) -> Self {
        Graph { pinned: Some(values), ..Graph::new(store) }
    }

    pub fn detached_values(&self) -> &[Mat] {
        &self.detached
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters read by this graph, in first-use order.
    pub fn params_used(&self) -> &[ParamId] {
        &self.load_order
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        // callers read rows as slices; keep every stored value row-major
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let frozen = self.store.entry(id).frozen;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: !frozen });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        self.load_order.push(id);
        v
    }

    /// Same value, no gradient path back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let m = match &self.pinned {
            Some(p) => {
                let m = p.get(k).expect("replayed graph detaches more values than were recorded").clone();
                assert_eq!(m.dim(), self.shape(v), "pinned value {k} has the wrong shape");
                m
            }
            None => self.value(v).clone(),
        };
        self.detached.push(m.clone());
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        let out = self.value(a) * &m;
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, m), ng)
    }

    pub fn add_const(&mut self, a: Var, m: &Mat) -> Var {
        let out = self.value(a) + m;
        let ng = self.ng(a);
        self.push(out, Op::AddConst(a), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// Row-wise softmax. `-inf` entries get probability exactly zero.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Sets entries flagged in `mask` (row-major) to `-inf`.
    pub fn mask_fill(&mut self, a: Var, mask: Vec<bool>) -> Var {
        let mut out = self.value(a).clone();
        for (v, &m) in out.iter_mut().zip(&mask) {
            if m {
                *v = f64::NEG_INFINITY;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::MaskFill(a, mask), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start, end), ng)
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, idx.to_vec()), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    /// `1 × n` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_axis(Axis(0)).expect("nonempty").insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// `-Σᵢ wᵢ · logp[i, targets[i]] / denom`.
    pub fn nll(&mut self, logp: Var, targets: &[usize], weights: &[f64], denom: f64) -> Var {
        let lp = self.value(logp);
        assert_eq!(targets.len(), lp.nrows());
        assert_eq!(weights.len(), lp.nrows());
        let total: f64 = targets.iter().zip(weights).enumerate().map(|(i, (&t, &w))| -w * lp[[i, t]]).sum();
        let ng = self.ng(logp);
        self.push(Array2::from_elem((1, 1), total / denom), Op::Nll(logp, targets.to_vec(), weights.to_vec(), denom), ng)
    }

    /// Mean over rows of `KL(target_i ‖ probs_i)` with `probs` floored at
    /// [`KL_FLOOR`] and `0 · ln 0 = 0`. `target` is a constant.
    pub fn kl(&mut self, target: Mat, probs: Var) -> Var {
        let value = kl_rows_mean(&target, self.value(probs));
        let ng = self.ng(probs);
        self.push(Array2::from_elem((1, 1), value), Op::Kl(probs, target), ng)
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Grads::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, d: Mat| {
                if self.nodes[v.0].needs_grad {
                    match &mut grads[v.0] {
                        Some(acc) => *acc += &d,
                        slot @ None => *slot = Some(d),
                    }
                }
            };
            let y = match &node.value {
                Value::Owned(m) => m,
                Value::Param(_) => &g,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        send(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(*b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, -g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        send(*a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        send(*b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, b) => {
                    if self.ng(*b) {
                        send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    send(*a, g);
                }
                Op::MulConst(a, m) => send(*a, &g * m),
                Op::AddConst(a) => send(*a, g),
                Op::Scale(a, c) => send(*a, g * *c),
                Op::Relu(a) => send(*a, ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| if y > 0.0 { g } else { 0.0 })),
                Op::Tanh(a) => send(*a, ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y))),
                Op::Sigmoid(a) => send(*a, ndarray::Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y))),
                Op::Abs(a) => {
                    let x = self.value(*a);
                    send(*a, ndarray::Zip::from(&g).and(x).map_collect(|&g, &x| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 }))
                }
                Op::Softmax(a) => {
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                    }
                    send(*a, d);
                }
                Op::LogSoftmax(a) => {
                    let mut d = g.clone();
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let gsum: f64 = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv.exp() * gsum);
                    }
                    send(*a, d);
                }
                Op::MaskFill(a, mask) => {
                    let mut d = g;
                    for (v, &m) in d.iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.ng(p) {
                            send(p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        if self.ng(p) {
                            send(p, g.slice(s![start..start + h, ..]).to_owned());
                        }
                        start += h;
                    }
                }
                Op::SliceCols(a, s0, s1) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *s0..*s1]).assign(&g);
                    send(*a, d);
                }
                Op::SliceRows(a, s0, s1) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![*s0..*s1, ..]).assign(&g);
                    send(*a, d);
                }
                Op::Gather(a, idx) => {
                    let mut d: Mat = Array2::zeros(self.shape(*a));
                    for (grow, &i) in g.rows().into_iter().zip(idx) {
                        let mut r = d.row_mut(i);
                        r += &grow;
                    }
                    send(*a, d);
                }
                Op::LayerNorm(a, inv_std) => {
                    let mut d = g.clone();
                    for ((mut drow, yrow), &is) in d.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                        let n = drow.len() as f64;
                        let mean_g = drow.sum() / n;
                        let mean_gy = drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv = is * (*dv - mean_g - yv * mean_gy));
                    }
                    send(*a, d);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let row = g.row(0).to_owned() / r as f64;
                    send(*a, row.broadcast((r, c)).expect("broadcast").to_owned());
                }
                Op::Sum(a) => send(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
                Op::Nll(logp, targets, weights, denom) => {
                    let mut d = Array2::zeros(self.shape(*logp));
                    let scale = g[[0, 0]] / denom;
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        d[[i, t]] = -w * scale;
                    }
                    send(*logp, d);
                }
                Op::Kl(probs, target) => {
                    let p = self.value(*probs);
                    let n = p.nrows() as f64;
                    let scale = g[[0, 0]] / n;
                    let d = ndarray::Zip::from(target).and(p).map_collect(|&t, &p| {
                        if t > 0.0 && p > KL_FLOOR {
                            -scale * t / p
                        } else {
                            0.0
                        }
                    });
                    send(*probs, d);
                }
            }
        }
        out
    }
}

pub fn softmax_rows(a: &Mat) -> Mat {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Mean over rows of `Σₖ tₖ · (ln tₖ − ln max(pₖ, floor))`, `0 · ln 0 = 0`.
pub fn kl_rows_mean(target: &Mat, probs: &Mat) -> f64 {
    assert_eq!(target.dim(), probs.dim());
    let total: f64 = ndarray::Zip::from(target)
        .and(probs)
        .fold(0.0, |acc, &t, &p| if t > 0.0 { acc + t * (t.ln() - p.max(KL_FLOOR).ln()) } else { acc });
    total / target.nrows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::rng::rng_for;
    use ndarray::array;

    /// Central differences of `f` around the current parameter values.
    fn numeric_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Array2::zeros(store.get(id).dim());
        for idx in 0..out.len() {
            let (r, c) = (idx / out.ncols(), idx % out.ncols());
            let orig = store.get(id)[[r, c]];
            store.get_mut(id)[[r, c]] = orig + h;
            let fp = f(store);
            store.get_mut(id)[[r, c]] = orig - h;
            let fm = f(store);
            store.get_mut(id)[[r, c]] = orig;
            out[[r, c]] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn check(store: &mut ParamStore, f: &dyn Fn(&ParamStore) -> (f64, Grads)) {
        let (_, grads) = f(store);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let num = numeric_grad(store, id, &|s| f(s).0);
            let zero = Array2::zeros(num.dim());
            let ana = grads.get(id).unwrap_or(&zero);
            for (a, n) in ana.iter().zip(num.iter()) {
                let scale = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / scale < 1e-5, "param {}: analytic {a} vs numeric {n}", store.entry(id).name);
            }
        }
    }

    fn store_with(shapes: &[(usize, usize)]) -> ParamStore {
        let mut rng = rng_for(11, &[]);
        let mut s = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            s.add_normal(format!("p{i}"), ParamGroup::RelationPredictor, r, c, 0.7, &mut rng);
        }
        s
    }

    #[test]
    fn elementwise_and_matmul_ops_match_finite_differences() {
        let mut store = store_with(&[(3, 4), (4, 2), (1, 2), (3, 2)]);
        check(&mut store, &|s| {
            let mut g = Graph::new(s);
            let (a, b, c, d) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)), g.param(ParamId(3)));
            let x = g.matmul(a, b);
            let x = g.add_row(x, c);
            let t = g.tanh(x);
            let sg = g.sigmoid(d);
            let m = g.mul(t, sg);
            let r = g.relu(m);
            let nt = g.matmul_nt(r, d);
            let ab = g.abs(nt);
            let sc = g.scale(ab, 0.3);
            let sub = g.sub(sc, nt);
            let loss = g.sum(sub);
            (g.scalar(loss), g.backward(loss))
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut store = store_with(&[(4, 3), (2, 3), (4, 2)]);
        check(&mut store, &|s| {
            let mut g = Graph::new(s);
            let (a, b, c) = (g.param(ParamId(0)), g.param(ParamId(1)), g.param(ParamId(2)));
            let rows = g.concat_rows(&[a, b]);
            let gat = g.gather_rows(rows, &[5, 0, 0, 3]);
            let cols = g.concat_cols(&[gat, c]);
            let sl = g.slice_cols(cols, 1, 4);
            let sr = g.slice_rows(sl, 1, 3);
            let ln = g.layer_norm(cols);
            let mr = g.mean_rows(ln);
            let w = g.mul_const(sr, array![[1.0, -2.0, 0.5], [0.1, 0.2, 0.3]]);
            let l1 = g.sum(w);
            let l2 = g.sum(mr);
            let sq = g.mul(mr, mr);
            let l3 = g.sum(sq);
            let l = g.add(l1, l2);
            let l = g.add(l, l3);
            (g.scalar(l), g.backward(l))
        });
    }

    #[test]
    fn probability_ops_match_finite_differences() {
        let mut store = store_with(&[(3, 4), (3, 4)]);
        let target = softmax_rows(&array![[0.2, 1.0, -1.0, 0.0], [0.0, 0.0, 0.0, 0.0], [3.0, -2.0, 0.5, 0.1]]);
        check(&mut store, &|s| {
            let mut g = Graph::new(s);
            let (a, b) = (g.param(ParamId(0)), g.param(ParamId(1)));
            let masked = g.mask_fill(a, vec![false, true, false, false, false, false, false, false, true, true, true, false]);
            let p = g.softmax(masked);
            let kl = g.kl(target.clone(), p);
            let lp = g.log_softmax(b);
            let ce = g.nll(lp, &[1, 3, 0], &[1.0, 0.5, 2.0], 3.0);
            let pb = g.softmax(b);
            let kl2 = g.kl(target.clone(), pb);
            let l = g.add(kl, ce);
            let l = g.add(l, kl2);
            (g.scalar(l), g.backward(l))
        });
    }

    #[test]
    fn detached_subgraphs_receive_no_gradient() {
        let store = store_with(&[(2, 2), (2, 2)]);
        let mut g = Graph::new(&store);
        let (a, b) = (g.param(ParamId(0)), g.param(ParamId(1)));
        let ad = g.detach(a);
        let x = g.matmul(ad, b);
        let l = g.sum(x);
        let grads = g.backward(l);
        assert!(grads.get(ParamId(0)).is_none());
        assert!(grads.get(ParamId(1)).is_some());
    }

    #[test]
    fn shared_parameter_accumulates_both_uses() {
        let store = store_with(&[(1, 1)]);
        let w = store.get(ParamId(0))[[0, 0]];
        let mut g = Graph::new(&store);
        let a = g.param(ParamId(0));
        let a2 = g.param(ParamId(0));
        assert_eq!(a, a2);
        let sq = g.mul(a, a2);
        let l = g.sum(sq);
        let grads = g.backward(l);
        assert!((grads.get(ParamId(0)).unwrap()[[0, 0]] - 2.0 * w).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_entries_are_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0, 2.0, 3.0]]);
        let m = g.mask_fill(x, vec![false, true, false]);
        let p = g.softmax(m);
        let v = g.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = store_with(&[(2, 2)]);
        store.freeze_group(ParamGroup::RelationPredictor);
        let mut g = Graph::new(&store);
        let a = g.param(ParamId(0));
        let l = g.sum(a);
        assert!(g.backward(l).get(ParamId(0)).is_none());
    }
}
