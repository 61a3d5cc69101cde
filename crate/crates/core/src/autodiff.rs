//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape once in reverse. Parameters enter the
//! tape through [`Graph::param`] and their gradients are reported by id.

use std::collections::HashMap;
use std::ops::Range;

use crate::float::Real;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One independent attention problem: queries `q` attend over keys `k`.
#[derive(Clone, Debug)]
pub struct AttnSegment {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    /// Keys flagged `false` receive zero attention.
    pub key_valid: Option<Vec<bool>>,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Tensor<T>, inv_std: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    Select { a: Var, src: Vec<usize> },
    Transpose(Var),
    Concat(Vec<Var>),
    Sum(Var),
    RowSum(Var),
    RowCosine { a: Var, b: Var, eps: T },
    L2Normalize { a: Var, eps: T },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<Tensor<T>>, scale: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that tracks gradients for non-frozen parameters.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), track: true }
    }

    /// A graph that never tracks gradients (pure evaluation).
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), track: false }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.track });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape once per graph; repeated calls reuse the node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = !store.is_frozen(id);
        let v = self.push(store.value(id).clone(), Op::Param, needs);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = Tensor::matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(x.rows(), x.cols(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.shape(), (1, x.cols()), "bias shape mismatch");
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (o, &bb) in value.row_mut(r).iter_mut().zip(b.data()) {
                *o = *o + bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Multiplies row `i` of `a` by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (x, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.shape(), (x.rows(), 1), "row scale shape mismatch");
        let mut value = x.clone();
        for r in 0..value.rows() {
            let f = sv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|o| *o = *o * f);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(value, Op::ScaleRows(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|x| *x = *x - lse);
        }
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Row-wise layer normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        assert_eq!(g.shape(), (1, d));
        assert_eq!(b.shape(), (1, d));
        let mut xhat = Tensor::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let mut value = Tensor::zeros(n, d);
        let dn = T::c(d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                value.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).gather_rows(&idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows { a, idx }, ng)
    }

    /// Builds a `rows x d` tensor with `out[idx[i]] += a[i]`.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), idx.len());
        let mut value = Tensor::zeros(rows, av.cols());
        for (i, &r) in idx.iter().enumerate() {
            for (o, &x) in value.row_mut(r).iter_mut().zip(av.row(i)) {
                *o = *o + x;
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::ScatterRows { a, idx }, ng)
    }

    /// Gathers arbitrary flat (row-major) elements of `a` into a `rows x cols` tensor.
    pub fn select(&mut self, a: Var, src: Vec<usize>, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        let value = Tensor::from_vec(rows, cols, src.iter().map(|&i| av.data()[i]).collect());
        let ng = self.ng(a);
        self.push(value, Op::Select { a, src }, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let value = {
            let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat_rows(&refs)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::Concat(parts), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_vec(1, 1, vec![self.value(a).sum()]);
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::c(1.0 / n as f64))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.rows(), 1, |r, _| av.row(r).iter().copied().sum());
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Row-wise cosine similarity; the norm product is floored at `eps`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: T) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let value = Tensor::from_fn(x.rows(), 1, |r, _| {
            let (p, q) = (x.row(r), y.row(r));
            let dot: T = p.iter().zip(q).map(|(&u, &v)| u * v).sum();
            dot / (norm(p) * norm(q)).max(eps)
        });
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::RowCosine { a, b, eps }, ng)
    }

    /// Scales each row to unit norm (`eps` added to the norm).
    pub fn l2_normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let n = norm(value.row(r)) + eps;
            value.row_mut(r).iter_mut().for_each(|x| *x = *x / n);
        }
        let ng = self.ng(a);
        self.push(value, Op::L2Normalize { a, eps }, ng)
    }

    /// Multi-head scaled dot-product attention over independent segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "key width mismatch");
        assert_eq!(vv.cols(), d, "value width mismatch");
        assert_eq!(kv.rows(), vv.rows());
        assert!(spec.heads > 0 && d % spec.heads == 0, "width {d} not divisible by {} heads", spec.heads);
        let dh = d / spec.heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::<T>::zeros(qv.rows(), d);
        let mut probs = Vec::with_capacity(spec.segments.len() * spec.heads);
        for seg in &spec.segments {
            let (nq, nk) = (seg.q.len(), seg.k.len());
            for h in 0..spec.heads {
                let mut p = Tensor::zeros(nq, nk);
                if nq > 0 && nk > 0 {
                    // scores = Q_h K_h^T
                    unsafe {
                        T::gemm(
                            nq,
                            dh,
                            nk,
                            scale,
                            qv.data().as_ptr().add(seg.q.start * d + h * dh),
                            d as isize,
                            1,
                            kv.data().as_ptr().add(seg.k.start * d + h * dh),
                            1,
                            d as isize,
                            T::zero(),
                            p.data_mut().as_mut_ptr(),
                            nk as isize,
                            1,
                        );
                    }
                    for r in 0..nq {
                        let row = p.row_mut(r);
                        if let Some(valid) = &spec.key_valid {
                            for (c, x) in row.iter_mut().enumerate() {
                                if !valid[seg.k.start + c] {
                                    *x = T::neg_infinity();
                                }
                            }
                        }
                        softmax_in_place(row);
                    }
                    // out_h = P V_h
                    unsafe {
                        T::gemm(
                            nq,
                            nk,
                            dh,
                            T::one(),
                            p.data().as_ptr(),
                            nk as isize,
                            1,
                            vv.data().as_ptr().add(seg.k.start * d + h * dh),
                            d as isize,
                            1,
                            T::zero(),
                            out.data_mut().as_mut_ptr().add(seg.q.start * d + h * dh),
                            d as isize,
                            1,
                        );
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs, scale }, ng)
    }

    /// Reverse pass from a scalar (`1 x 1`) output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(1, 1, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c)))
    }

    fn acc_add(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: &Tensor<T>) {
        if let Some(buf) = self.acc(grads, v) {
            buf.add_assign(t);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(buf) = self.acc(grads, a) {
                    if ta {
                        gemm_into(bv, tb, g, true, buf, true);
                    } else {
                        gemm_into(g, false, bv, !tb, buf, true);
                    }
                }
                if let Some(buf) = self.acc(grads, b) {
                    if tb {
                        gemm_into(g, true, av, ta, buf, true);
                    } else {
                        gemm_into(av, !ta, g, false, buf, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.acc_add(grads, a, g);
                self.acc_add(grads, b, g);
            }
            &Op::Sub(a, b) => {
                self.acc_add(grads, a, g);
                if let Some(buf) = self.acc(grads, b) {
                    for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o = *o - x;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(buf) = self.acc(grads, a) {
                    for ((o, &x), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o = *o + x * y;
                    }
                }
                if let Some(buf) = self.acc(grads, b) {
                    for ((o, &x), &y) in buf.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o = *o + x * y;
                    }
                }
            }
            &Op::AddBias(a, bias) => {
                self.acc_add(grads, a, g);
                if let Some(buf) = self.acc(grads, bias) {
                    for r in 0..g.rows() {
                        for (o, &x) in buf.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(buf) = self.acc(grads, a) {
                    for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
                        *o = *o + x * s;
                    }
                }
            }
            &Op::ScaleRows(a, s) => {
                let (av, sv) = (self.value(a), self.value(s));
                if let Some(buf) = self.acc(grads, a) {
                    for r in 0..g.rows() {
                        let f = sv.get(r, 0);
                        for (o, &x) in buf.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = *o + x * f;
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, s) {
                    for r in 0..g.rows() {
                        let d: T = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                        let cur = buf.get(r, 0);
                        buf.set(r, 0, cur + d);
                    }
                }
            }
            &Op::Gelu(a) => self.unary_back(grads, a, g, out, |x, _| gelu_grad(x)),
            &Op::Tanh(a) => self.unary_back(grads, a, g, out, |_, y| T::one() - y * y),
            &Op::Sigmoid(a) => self.unary_back(grads, a, g, out, |_, y| y * (T::one() - y)),
            &Op::Softmax(a) => {
                if let Some(buf) = self.acc(grads, a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), out.row(r));
                        let dot: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for ((o, &gg), &y) in buf.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = *o + y * (gg - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(a) => {
                if let Some(buf) = self.acc(grads, a) {
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), out.row(r));
                        let total: T = gr.iter().copied().sum();
                        for ((o, &gg), &y) in buf.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = *o + gg - y.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let gv = self.value(*gain);
                if let Some(buf) = self.acc(grads, *gain) {
                    for r in 0..n {
                        for c in 0..d {
                            let cur = buf.get(0, c);
                            buf.set(0, c, cur + g.get(r, c) * xhat.get(r, c));
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *bias) {
                    for r in 0..n {
                        for (o, &x) in buf.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *x) {
                    let dn = T::c(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        for c in 0..d {
                            dxhat[c] = g.get(r, c) * gv.get(0, c);
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xhat.row(r)).map(|(&p, &q)| p * q).sum();
                        let is = inv_std[r];
                        for c in 0..d {
                            let v = is / dn * (dn * dxhat[c] - s1 - xhat.get(r, c) * s2);
                            let cur = buf.get(r, c);
                            buf.set(r, c, cur + v);
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(buf) = self.acc(grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &x) in buf.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::ScatterRows { a, idx } => {
                if let Some(buf) = self.acc(grads, *a) {
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &x) in buf.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o = *o + x;
                        }
                    }
                }
            }
            Op::Select { a, src } => {
                if let Some(buf) = self.acc(grads, *a) {
                    let data = buf.data_mut();
                    for (&s, &x) in src.iter().zip(g.data()) {
                        data[s] = data[s] + x;
                    }
                }
            }
            &Op::Transpose(a) => {
                let gt = g.transpose();
                self.acc_add(grads, a, &gt);
            }
            Op::Concat(parts) => {
                let mut row = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if let Some(buf) = self.acc(grads, p) {
                        for r in 0..n {
                            for (o, &x) in buf.row_mut(r).iter_mut().zip(g.row(row + r)) {
                                *o = *o + x;
                            }
                        }
                    }
                    row += n;
                }
            }
            &Op::Sum(a) => {
                let s = g.scalar();
                if let Some(buf) = self.acc(grads, a) {
                    buf.data_mut().iter_mut().for_each(|o| *o = *o + s);
                }
            }
            &Op::RowSum(a) => {
                if let Some(buf) = self.acc(grads, a) {
                    for r in 0..g.rows() {
                        let s = g.get(r, 0);
                        buf.row_mut(r).iter_mut().for_each(|o| *o = *o + s);
                    }
                }
            }
            &Op::RowCosine { a, b, eps } => {
                let (x, y) = (self.value(a), self.value(b));
                let n = x.rows();
                let mut ga = Tensor::zeros(n, x.cols());
                let mut gb = Tensor::zeros(n, x.cols());
                for r in 0..n {
                    let (p, q) = (x.row(r), y.row(r));
                    let (np, nq) = (norm(p), norm(q));
                    let prod = np * nq;
                    let dot: T = p.iter().zip(q).map(|(&u, &v)| u * v).sum();
                    let gr = g.get(r, 0);
                    let (base, ca, cb) = if prod > eps {
                        (gr / prod, gr * dot / (prod * np * np), gr * dot / (prod * nq * nq))
                    } else {
                        (gr / eps, T::zero(), T::zero())
                    };
                    for c in 0..p.len() {
                        ga.set(r, c, base * q[c] - ca * p[c]);
                        gb.set(r, c, base * p[c] - cb * q[c]);
                    }
                }
                self.acc_add(grads, a, &ga);
                self.acc_add(grads, b, &gb);
            }
            &Op::L2Normalize { a, eps } => {
                let x = self.value(a);
                let tiny = T::min_positive_value();
                if let Some(buf) = self.acc(grads, a) {
                    for r in 0..x.rows() {
                        let p = x.row(r);
                        let np = norm(p);
                        let d = np + eps;
                        let dot: T = p.iter().zip(g.row(r)).map(|(&u, &v)| u * v).sum();
                        let k = dot / (d * d * np.max(tiny));
                        for c in 0..p.len() {
                            let cur = buf.get(r, c);
                            buf.set(r, c, cur + g.get(r, c) / d - k * p[c]);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs, scale } => {
                self.attention_back(*q, *k, *v, spec, probs, *scale, g, grads);
            }
        }
    }

    fn unary_back(
        &self,
        grads: &mut [Option<Tensor<T>>],
        a: Var,
        g: &Tensor<T>,
        out: &Tensor<T>,
        f: impl Fn(T, T) -> T,
    ) {
        let x = self.value(a);
        if let Some(buf) = self.acc(grads, a) {
            for (((o, &gg), &xx), &yy) in buf.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(out.data()) {
                *o = *o + gg * f(xx, yy);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_back(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Tensor<T>],
        scale: T,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / spec.heads;
        let mut gq = Tensor::<T>::zeros(qv.rows(), d);
        let mut gk = Tensor::<T>::zeros(kv.rows(), d);
        let mut gv = Tensor::<T>::zeros(vv.rows(), d);
        let mut pi = 0;
        for seg in &spec.segments {
            let (nq, nk) = (seg.q.len(), seg.k.len());
            for h in 0..spec.heads {
                let p = &probs[pi];
                pi += 1;
                if nq == 0 || nk == 0 {
                    continue;
                }
                let go = unsafe { g.data().as_ptr().add(seg.q.start * d + h * dh) };
                // dP = dO V^T
                let mut dp = Tensor::zeros(nq, nk);
                unsafe {
                    T::gemm(
                        nq,
                        dh,
                        nk,
                        T::one(),
                        go,
                        d as isize,
                        1,
                        vv.data().as_ptr().add(seg.k.start * d + h * dh),
                        1,
                        d as isize,
                        T::zero(),
                        dp.data_mut().as_mut_ptr(),
                        nk as isize,
                        1,
                    );
                    // dV += P^T dO
                    T::gemm(
                        nk,
                        nq,
                        dh,
                        T::one(),
                        p.data().as_ptr(),
                        1,
                        nk as isize,
                        go,
                        d as isize,
                        1,
                        T::one(),
                        gv.data_mut().as_mut_ptr().add(seg.k.start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
                // dS = P * (dP - rowsum(dP * P)), then the score scale
                for r in 0..nq {
                    let pr = p.row(r);
                    let dot: T = dp.row(r).iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in dp.row_mut(r).iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                unsafe {
                    // dQ += dS K
                    T::gemm(
                        nq,
                        nk,
                        dh,
                        T::one(),
                        dp.data().as_ptr(),
                        nk as isize,
                        1,
                        kv.data().as_ptr().add(seg.k.start * d + h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gq.data_mut().as_mut_ptr().add(seg.q.start * d + h * dh),
                        d as isize,
                        1,
                    );
                    // dK += dS^T Q
                    T::gemm(
                        nk,
                        nq,
                        dh,
                        T::one(),
                        dp.data().as_ptr(),
                        1,
                        nk as isize,
                        qv.data().as_ptr().add(seg.q.start * d + h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gk.data_mut().as_mut_ptr().add(seg.k.start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        self.acc_add(grads, q, &gq);
        self.acc_add(grads, k, &gk);
        self.acc_add(grads, v, &gv);
    }
}

#[inline]
pub fn norm<T: Real>(xs: &[T]) -> T {
    xs.iter().map(|&x| x * x).sum::<T>().sqrt()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    T::c(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::c(GELU_K);
    let c = T::c(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * k * (T::one() + T::c(3.0) * c * x * x)
}

/// Numerically stable in-place softmax; an all `-inf` row becomes all zeros.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / total);
}
