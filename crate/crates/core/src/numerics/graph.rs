//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the values it produced. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every node that (transitively) depends on a leaf
//! created with `requires_grad = true`.

use std::sync::Arc;

use super::kernels;
use super::params::ParamStore;
use super::sparse_attention::{self, AttentionGrads, AttentionPattern};
use super::tensor::Tensor;
use crate::error::{config_err, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Mapping from the parameters of one [`ParamStore`] to graph leaves.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    offset: usize,
    len: usize,
}

impl Bound {
    pub fn var(&self, id: super::params::ParamId) -> Var {
        debug_assert!(id.0 < self.len);
        Var(self.offset + id.0)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Softmax(Var),
    Gather { x: Var, index: Arc<[Option<usize>]> },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        pattern: Arc<AttentionPattern>,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    MeanSquaredError { pred: Var, target: Arc<Tensor> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameters bound through `bound`, in store order.
    /// Parameters that did not influence the loss get zeros.
    pub fn params(&self, bound: &Bound, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| {
                self.get(bound.var(id))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}

fn shape_err<T>(op: &str, a: &[usize], b: &[usize]) -> Result<T> {
    config_err(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient (stop-gradient input).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert every parameter of `store` as a leaf, sharing storage.
    pub fn bind(&mut self, store: &ParamStore, requires_grad: bool) -> Bound {
        let offset = self.nodes.len();
        for t in store.shared() {
            self.nodes.push(Node {
                value: Arc::clone(t),
                op: Op::Leaf,
                needs_grad: requires_grad,
            });
        }
        Bound {
            offset,
            len: store.len(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// `x · w + b` over the last axis of `x`; `w` is `d_in × d_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let ws = wv.shape();
        if ws.len() != 2 || xv.cols() != ws[0] {
            return shape_err("linear", xv.shape(), ws);
        }
        let (din, dout) = (ws[0], ws[1]);
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.len() != dout {
                    return shape_err("linear bias", ws, bv.shape());
                }
                Some(bv.data())
            }
            None => None,
        };
        let y = kernels::matmul_bias(xv.data(), xv.rows(), din, wv.data(), dout, bias);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = dout;
        let t = Tensor::new(&shape, y)?;
        let needs = self.ng(&[x, w]) || b.map(|b| self.ng(&[b])).unwrap_or(false);
        Ok(self.push(t, Op::Linear { x, w, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err("add", av.shape(), bv.shape());
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape(), data)?;
        let needs = self.ng(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let needs = self.ng(&[x]);
        self.push(t, Op::Scale(x, c), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != d || bv.len() != d {
            return shape_err("layer_norm", xv.shape(), gv.shape());
        }
        let (y, xhat, inv_std) = kernels::layer_norm(xv.data(), xv.rows(), d, gv.data(), bv.data(), eps);
        let t = Tensor::new(xv.shape(), y)?;
        let needs = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let needs = self.ng(&[x]);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let d = t.cols();
        kernels::softmax_rows(t.data_mut(), d);
        let needs = self.ng(&[x]);
        self.push(t, Op::Softmax(x), needs)
    }

    /// Row gather with concatenation: viewing `x` as `rows × c`, output row
    /// `i` is the concatenation of `x[index[i·group + j]]` for `j < group`,
    /// with `None` producing a zero block. The result has shape `out_shape`,
    /// whose element count must be `index.len() · c`.
    pub fn gather(
        &mut self,
        x: Var,
        index: Arc<[Option<usize>]>,
        group: usize,
        out_shape: &[usize],
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let rows = xv.rows();
        if group == 0 || index.len() % group != 0 {
            return config_err("gather: index length must be a multiple of group");
        }
        if out_shape.iter().product::<usize>() != index.len() * c {
            return config_err(format!(
                "gather: {} rows of width {} do not fit {:?}",
                index.len(),
                c,
                out_shape
            ));
        }
        let mut out = vec![0.0; index.len() * c];
        for (slot, src) in index.iter().enumerate() {
            if let Some(r) = *src {
                if r >= rows {
                    return config_err(format!("gather: row {r} out of range {rows}"));
                }
                out[slot * c..(slot + 1) * c].copy_from_slice(xv.row(r));
            }
        }
        let t = Tensor::new(out_shape, out)?;
        let needs = self.ng(&[x]);
        Ok(self.push(t, Op::Gather { x, index }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Multi-head attention restricted to `pattern`. `q` supplies the query
    /// rows, `k`/`v` the key/value rows; all share the channel count `d`.
    /// `bias`, when given, is a `table_rows × heads` relative-position table.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        pattern: Arc<AttentionPattern>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return config_err(format!("attention: {d} channels not divisible into {heads} heads"));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() {
            return shape_err("attention", kv.shape(), vv.shape());
        }
        if pattern.n_queries() != qv.rows() || pattern.n_keys() != kv.rows() {
            return config_err(format!(
                "attention: pattern is {}x{}, tensors are {}x{}",
                pattern.n_queries(),
                pattern.n_keys(),
                qv.rows(),
                kv.rows()
            ));
        }
        let bias_data = match (bias, pattern.bias_table_rows()) {
            (Some(b), Some(rows)) => {
                let bt = self.value(b);
                if bt.len() != rows * heads {
                    return shape_err("attention bias", bt.shape(), &[rows, heads]);
                }
                Some(bt.data())
            }
            (None, _) => None,
            (Some(_), None) => return config_err("attention: bias given but pattern has no bias rows"),
        };
        let (out, probs) =
            sparse_attention::forward(qv.data(), kv.data(), vv.data(), d, heads, &pattern, bias_data);
        let t = Tensor::new(qv.shape(), out)?;
        let mut needs = self.ng(&[q, k, v]);
        if let Some(b) = bias {
            needs |= self.ng(&[b]);
        }
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                pattern,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Mean over all rows; result has shape `[c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for i in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let t = Tensor::new(&[c], out).expect("shape matches");
        let needs = self.ng(&[x]);
        self.push(t, Op::MeanRows(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let needs = self.ng(&[x]);
        self.push(t, Op::Sum(x), needs)
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if target >= lv.len() {
            return config_err(format!("cross_entropy: class {target} >= {}", lv.len()));
        }
        let mut probs = lv.data().to_vec();
        let n = probs.len();
        kernels::softmax_rows(&mut probs, n);
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        let needs = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    pub fn mean_squared_error(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return shape_err("mean_squared_error", pv.shape(), target.shape());
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let needs = self.ng(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MeanSquaredError {
                pred,
                target: Arc::new(target),
            },
            needs,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return config_err("backward: loss must have exactly one element");
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn fresh(&self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        node.needs_grad.then(|| vec![0.0; node.value.len()])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Option<Var>, buf: Option<Vec<f64>>) {
        let (Some(v), Some(buf)) = (v, buf) else { return };
        match grads[v.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(&buf).for_each(|(t, s)| *t += s),
            None => grads[v.0] = Some(buf),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                let mut dx = self.fresh(*x);
                let mut dw = self.fresh(*w);
                let mut db = b.and_then(|b| self.fresh(b));
                kernels::matmul_bias_backward(
                    g,
                    xv.data(),
                    xv.rows(),
                    din,
                    wv.data(),
                    dout,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                self.accumulate(grads, Some(*x), dx);
                self.accumulate(grads, Some(*w), dw);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(buf) = self.grad_buf(grads, *v) {
                        buf.iter_mut().zip(g).for_each(|(t, s)| *t += s);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(t, s)| *t += c * s);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gamma).data().to_vec();
                if let Some(buf) = self.grad_buf(grads, *gamma) {
                    for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                        buf[i % d] += gi * h;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *beta) {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % d] += gi;
                    }
                }
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                        let m1 = dh.iter().sum::<f64>() / d as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            buf[r * d + c] += is * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data().to_vec();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for ((t, s), v) in buf.iter_mut().zip(g).zip(xv) {
                        *t += s * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.cols();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..d {
                            buf[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let c = self.value(*x).cols();
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for (slot, src) in index.iter().enumerate() {
                        if let Some(r) = *src {
                            for (t, s) in buf[r * c..(r + 1) * c].iter_mut().zip(&g[slot * c..(slot + 1) * c]) {
                                *t += s;
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(t, s)| *t += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                pattern,
                heads,
                probs,
            } => {
                let d = self.value(*q).cols();
                let mut dq = self.fresh(*q);
                let mut dk = self.fresh(*k);
                let mut dv = self.fresh(*v);
                let mut db = bias.and_then(|b| self.fresh(b));
                sparse_attention::backward(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    d,
                    *heads,
                    pattern,
                    AttentionGrads {
                        dq: dq.as_deref_mut(),
                        dk: dk.as_deref_mut(),
                        dv: dv.as_deref_mut(),
                        dbias: db.as_deref_mut(),
                    },
                );
                self.accumulate(grads, Some(*q), dq);
                self.accumulate(grads, Some(*k), dk);
                self.accumulate(grads, Some(*v), dv);
                self.accumulate(grads, *bias, db);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (rows, c) = (xv.rows(), xv.cols());
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for r in 0..rows {
                        for j in 0..c {
                            buf[r * c + j] += g[j] / rows as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(buf) = self.grad_buf(grads, *x) {
                    buf.iter_mut().for_each(|t| *t += g[0]);
                }
            }
            Op::CrossEntropy { logits, target, probs } => {
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    for (i, (t, p)) in buf.iter_mut().zip(probs).enumerate() {
                        let y = if i == *target { 1.0 } else { 0.0 };
                        *t += g[0] * (p - y);
                    }
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred).data().to_vec();
                let n = pv.len() as f64;
                if let Some(buf) = self.grad_buf(grads, *pred) {
                    for ((t, p), y) in buf.iter_mut().zip(pv).zip(target.data()) {
                        *t += g[0] * 2.0 * (p - y) / n;
                    }
                }
            }
        }
    }
}
