use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::scan;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Log1p,
    Tanh,
    Sigmoid,
    Softplus,
    Silu,
    Square,
}

impl Unary {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Log1p => x.ln_1p(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Log1p => 1.0 / (1.0 + x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Square => 2.0 * x,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    SumAll(Var),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Unary(Var, Unary),
    Clip(Var, f64, f64),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    CausalConv { x: Var, w: Var, b: Var },
    Scan(Box<scan::ScanNode>),
    BceWithLogits(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the reverse
/// of insertion order is a valid topological order for backpropagation.
///
/// A graph built with [`Graph::no_grad`] evaluates the same ops but keeps no
/// auxiliary state for the backward pass and refuses to run it.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            backward_done: false,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{what}: shape {sa:?} vs {sb:?}");
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.zip_with(a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    /// `a[n,d] + b[1,d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.shape(a);
        assert_eq!(self.value(b).len(), d, "add_row: bias length vs {d} columns");
        let ta = self.value(a);
        let tb = self.value(b).data();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bj) in row.iter_mut().zip(tb) {
                *o += bj;
            }
        }
        self.push(Tensor::new(n, d, out), Op::AddRow(a, b))
    }

    /// `a[n,d] * b[1,d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.shape(a);
        assert_eq!(self.value(b).len(), d, "mul_row: gain length vs {d} columns");
        let tb = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            for (o, &bj) in row.iter_mut().zip(tb) {
                *o *= bj;
            }
        }
        self.push(Tensor::new(n, d, out), Op::MulRow(a, b))
    }

    /// Scales row `i` of `a[n,d]` by `c[i]` (`c` has `n` elements).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (n, d) = self.shape(a);
        assert_eq!(self.value(c).len(), n, "mul_col: scale length vs {n} rows");
        let tc = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &ci) in out.chunks_mut(d.max(1)).zip(tc) {
            for o in row {
                *o *= ci;
            }
        }
        self.push(Tensor::new(n, d, out), Op::MulCol(a, c))
    }

    /// Divides row `i` of `a[n,d]` by `c[i]`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Var {
        let (n, d) = self.shape(a);
        assert_eq!(self.value(c).len(), n, "div_col: divisor length vs {n} rows");
        let tc = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for (row, &ci) in out.chunks_mut(d.max(1)).zip(tc) {
            for o in row {
                *o /= ci;
            }
        }
        self.push(Tensor::new(n, d, out), Op::DivCol(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Elementwise `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "add_const shape");
        let mut v = self.value(a).clone();
        v.add_assign(c.data());
        self.push(v, Op::AddConst(a))
    }

    /// Elementwise `a * c` for a constant `c` of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        assert_eq!(self.shape(a), c.shape(), "mul_const shape");
        let ta = self.value(a);
        let v = Tensor::new(
            ta.rows(),
            ta.cols(),
            ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        self.push(v, Op::MulConst(a, c.data().to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::new(n, m, out), Op::MatMul(a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Scatter-add of rows: `out[seg[i]] += a[i]`, with `n_segments` output rows.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], n_segments: usize) -> Var {
        let (n, d) = self.shape(a);
        assert_eq!(seg.len(), n, "segment_sum: {} ids for {n} rows", seg.len());
        let ta = self.value(a);
        let mut out = vec![0.0; n_segments * d];
        for (i, &s) in seg.iter().enumerate() {
            assert!(s < n_segments, "segment id {s} out of range {n_segments}");
            for (o, &x) in out[s * d..(s + 1) * d].iter_mut().zip(ta.row_slice(i)) {
                *o += x;
            }
        }
        self.push(Tensor::new(n_segments, d, out), Op::SegmentSum(a, seg.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (n, d) = self.shape(a);
        let ta = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather index {i} out of range {n}");
            out.extend_from_slice(ta.row_slice(i));
        }
        self.push(Tensor::new(idx.len(), d, out), Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let d = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), d, "concat_rows column mismatch");
            n += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::new(n, d, out), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let d: usize = widths.iter().sum();
        let mut out = vec![0.0; n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for r in 0..n {
                out[r * d + off..r * d + off + w].copy_from_slice(t.row_slice(r));
            }
            off += w;
        }
        self.push(Tensor::new(n, d, out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape element count");
        let v = Tensor::new(rows, cols, t.data().to_vec());
        self.push(v, Op::Reshape(a))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let v = self.value(a).map(|x| f.apply(x));
        self.push(v, Op::Unary(a, f))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log1p)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Clamp to `[lo, hi]`. The subgradient is 1 on the closed interval
    /// (boundaries included) and 0 outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clip(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.clip(a, 0.0, f64::INFINITY)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, d) = self.shape(a);
        let t = self.value(a);
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, &x) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
        }
        let value = Tensor::new(n, d, xhat.clone());
        let (xhat, inv_std) = if self.grad_enabled {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(value, Op::LayerNorm { x: a, xhat, inv_std })
    }

    /// Depthwise causal convolution over rows. `x[L,E]`, `w[E,K]`, `b[1,E]`;
    /// `out[t,e] = b[e] + sum_j w[e,j] * x[t-K+1+j, e]`, zero-padded on the left.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (l, e) = self.shape(x);
        let (e2, k) = self.shape(w);
        assert_eq!(e, e2, "causal_conv channels");
        assert_eq!(self.value(b).len(), e, "causal_conv bias");
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; l * e];
        for t in 0..l {
            for c in 0..e {
                let mut acc = tb.data()[c];
                for j in 0..k {
                    let src = t as isize - (k - 1 - j) as isize;
                    if src >= 0 {
                        acc += tw.get(c, j) * tx.get(src as usize, c);
                    }
                }
                out[t * e + c] = acc;
            }
        }
        self.push(Tensor::new(l, e, out), Op::CausalConv { x, w, b })
    }

    /// Diagonal selective state-space scan; see [`scan::forward`].
    pub fn selective_scan(
        &mut self,
        u: Var,
        dt: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
    ) -> Var {
        let (node, y) = scan::forward(
            scan::ScanInputs {
                u: (u, self.value(u)),
                dt: (dt, self.value(dt)),
                a: (a, self.value(a)),
                b: (b, self.value(b)),
                c: (c, self.value(c)),
                d: (d, self.value(d)),
            },
            self.grad_enabled,
        );
        self.push(y, Op::Scan(Box::new(node)))
    }

    /// Binary cross-entropy of a `1x1` logit against a label in `{0,1}`,
    /// in the numerically stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Var {
        let z = self.value(logit).item();
        let loss = z.max(0.0) - z * label + (-z.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceWithLogits(logit, label))
    }

    /// Backpropagates from the scalar `loss`. A graph can be differentiated
    /// once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Autodiff("backward on a no-grad graph".into()));
        }
        if self.backward_done {
            return Err(Error::Autodiff("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::with_capacity(self.params.len());
        for (&id, &v) in &self.params {
            params.push((id, v));
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, self, *a, |ga| add_into(ga, g));
                acc(grads, self, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(grads, self, *a, |ga| add_into(ga, g));
                acc(grads, self, *b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(grads, self, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / vb[i];
                    }
                });
                acc(grads, self, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                    }
                });
            }
            Op::AddRow(a, b) => {
                let d = self.shape(*a).1;
                acc(grads, self, *a, |ga| add_into(ga, g));
                acc(grads, self, *b, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let d = self.shape(*a).1.max(1);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |ga| {
                    for (gr, gar) in g.chunks(d).zip(ga.chunks_mut(d)) {
                        for ((o, &x), &bj) in gar.iter_mut().zip(gr).zip(vb) {
                            *o += x * bj;
                        }
                    }
                });
                acc(grads, self, *b, |gb| {
                    for (gr, ar) in g.chunks(d).zip(va.chunks(d)) {
                        for ((o, &x), &aj) in gb.iter_mut().zip(gr).zip(ar) {
                            *o += x * aj;
                        }
                    }
                });
            }
            Op::MulCol(a, c) => {
                let d = self.shape(*a).1.max(1);
                let (va, vc) = (self.value(*a).data(), self.value(*c).data());
                acc(grads, self, *a, |ga| {
                    for (i, (gr, gar)) in g.chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                        for (o, &x) in gar.iter_mut().zip(gr) {
                            *o += x * vc[i];
                        }
                    }
                });
                acc(grads, self, *c, |gc| {
                    for (i, (gr, ar)) in g.chunks(d).zip(va.chunks(d)).enumerate() {
                        gc[i] += gr.iter().zip(ar).map(|(x, y)| x * y).sum::<f64>();
                    }
                });
            }
            Op::DivCol(a, c) => {
                let d = self.shape(*a).1.max(1);
                let (va, vc) = (self.value(*a).data(), self.value(*c).data());
                acc(grads, self, *a, |ga| {
                    for (i, (gr, gar)) in g.chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                        for (o, &x) in gar.iter_mut().zip(gr) {
                            *o += x / vc[i];
                        }
                    }
                });
                acc(grads, self, *c, |gc| {
                    for (i, (gr, ar)) in g.chunks(d).zip(va.chunks(d)).enumerate() {
                        let dot: f64 = gr.iter().zip(ar).map(|(x, y)| x * y).sum();
                        gc[i] -= dot / (vc[i] * vc[i]);
                    }
                });
            }
            Op::AddScalar(a) | Op::AddConst(a) | Op::Reshape(a) => {
                acc(grads, self, *a, |ga| add_into(ga, g));
            }
            Op::Scale(a, s) => {
                acc(grads, self, *a, |ga| {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x * s;
                    }
                });
            }
            Op::MulConst(a, c) => {
                acc(grads, self, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, self, *a, |ga| {
                    // ga[n,k] += g[n,m] * b^T
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &vb[p * m..(p + 1) * m];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, self, *b, |gb| {
                    // gb[k,m] += a^T * g
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (o, &x) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += aip * x;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = g[0];
                acc(grads, self, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                });
            }
            Op::SegmentSum(a, seg) => {
                let d = self.shape(*a).1;
                acc(grads, self, *a, |ga| {
                    for (i, &s) in seg.iter().enumerate() {
                        add_into(&mut ga[i * d..(i + 1) * d], &g[s * d..(s + 1) * d]);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let d = self.shape(*a).1;
                acc(grads, self, *a, |ga| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * d..(i + 1) * d], &g[j * d..(j + 1) * d]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(grads, self, p, |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, d) = node.value.shape();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    acc(grads, self, p, |gp| {
                        for r in 0..n {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * d + off..r * d + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::Unary(a, f) => {
                let (x, y) = (self.value(*a).data(), node.value.data());
                acc(grads, self, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * f.deriv(x[i], y[i]);
                    }
                });
            }
            Op::Clip(a, lo, hi) => {
                let x = self.value(*a).data();
                acc(grads, self, *a, |ga| {
                    for i in 0..g.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (n, d) = node.value.shape();
                acc(grads, self, *x, |gx| {
                    for r in 0..n {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::CausalConv { x, w, b } => {
                let (l, e) = node.value.shape();
                let k = self.shape(*w).1;
                let (vx, vw) = (self.value(*x), self.value(*w));
                acc(grads, self, *b, |gb| {
                    for t in 0..l {
                        add_into(gb, &g[t * e..(t + 1) * e]);
                    }
                });
                acc(grads, self, *w, |gw| {
                    for t in 0..l {
                        for c in 0..e {
                            for j in 0..k {
                                let src = t as isize - (k - 1 - j) as isize;
                                if src >= 0 {
                                    gw[c * k + j] += g[t * e + c] * vx.get(src as usize, c);
                                }
                            }
                        }
                    }
                });
                acc(grads, self, *x, |gx| {
                    for t in 0..l {
                        for c in 0..e {
                            for j in 0..k {
                                let src = t as isize - (k - 1 - j) as isize;
                                if src >= 0 {
                                    gx[src as usize * e + c] += g[t * e + c] * vw.get(c, j);
                                }
                            }
                        }
                    }
                });
            }
            Op::Scan(sn) => {
                let out = scan::backward(sn, g, |v| self.value(v));
                for (v, gv) in out {
                    acc(grads, self, v, |dst| add_into(dst, &gv));
                }
            }
            Op::BceWithLogits(logit, label) => {
                let z = self.value(*logit).item();
                let s = g[0] * (sigmoid(z) - label);
                acc(grads, self, *logit, |gl| gl[0] += s);
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], graph: &Graph, v: Var, f: impl FnOnce(&mut Vec<f64>)) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; graph.value(v).len()]);
    f(slot);
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. any node, `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Collects parameter gradients into a store-shaped buffer.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut ParamGrads) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(id, g);
            }
        }
    }
}
