//! Linear tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every op in execution order together with the
//! activations its backward rule needs. [`Graph::backward`] walks the tape
//! once in reverse. Parameters enter the tape through [`Graph::param`],
//! which consults the graph's [`Trainable`] mode: frozen parameters become
//! constants and never receive gradients.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

use super::params::{Gradients, ParamId, ParamSet, Trainable};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm { x: usize, inv_std: Vec<f64> },
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        groups: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    MeanSquare(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Gradients from one backward pass, by node and by parameter.
pub struct Grads {
    graph: u32,
    nodes: Vec<Option<Tensor>>,
    params: Gradients,
}

impl Grads {
    /// Gradient with respect to any node; zeros when the node was not reached.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        assert_eq!(v.graph, self.graph, "variable from another graph");
        self.nodes[v.idx]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

pub struct Graph<'p> {
    id: u32,
    nodes: Vec<Node>,
    params: Option<&'p ParamSet>,
    mode: Trainable,
    param_nodes: Vec<Option<usize>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

impl<'p> Graph<'p> {
    /// Graph with no parameter set; inputs are added with [`Graph::leaf`].
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: None,
            mode: Trainable::Nothing,
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamSet, mode: Trainable) -> Self {
        let mut g = Graph::new();
        g.param_nodes = vec![None; params.len()];
        g.params = Some(params);
        g.mode = mode;
        g
    }

    pub fn mode(&self) -> Trainable {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn ix(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable used on a foreign graph");
        v.idx
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.ix(v)].value
    }

    /// Constant or differentiable input. Every leaf gets a gradient slot.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(idx) = self.param_nodes[id.0] {
            return Var { graph: self.id, idx };
        }
        let params = self.params.expect("graph built without a parameter set");
        let v = self.push(params.get(id).clone(), Op::Leaf);
        if self.mode.admits(params.kind(id)) {
            self.nodes[v.idx].param = Some(id);
        }
        self.param_nodes[id.0] = Some(v.idx);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a), self.ix(b));
        let out = self.nodes[ai].value.matmul(&self.nodes[bi].value)?;
        Ok(self.push(out, Op::MatMul(ai, bi)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a), self.ix(b));
        let out = self.nodes[ai].value.matmul_nt(&self.nodes[bi].value)?;
        Ok(self.push(out, Op::MatMulNT(ai, bi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a), self.ix(b));
        let out = self.nodes[ai].value.add(&self.nodes[bi].value)?;
        Ok(self.push(out, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a), self.ix(b));
        let out = self.nodes[ai].value.sub(&self.nodes[bi].value)?;
        Ok(self.push(out, Op::Sub(ai, bi)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a), self.ix(b));
        let out = self.nodes[ai].value.mul(&self.nodes[bi].value)?;
        Ok(self.push(out, Op::Mul(ai, bi)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ai = self.ix(a);
        let out = self.nodes[ai].value.scale(c);
        self.push(out, Op::Scale(ai, c))
    }

    fn row_broadcast_check(&self, x: usize, r: usize, op: &'static str) -> Result<()> {
        let (xv, rv) = (&self.nodes[x].value, &self.nodes[r].value);
        if rv.numel() != xv.cols() {
            return Err(Error::shape(op, xv.shape(), rv.shape()));
        }
        Ok(())
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xi, ri) = (self.ix(x), self.ix(row));
        self.row_broadcast_check(xi, ri, "add_row")?;
        let xv = &self.nodes[xi].value;
        let r = self.nodes[ri].value.data();
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        Ok(self.push(out, Op::AddRow(xi, ri)))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xi, ri) = (self.ix(x), self.ix(row));
        self.row_broadcast_check(xi, ri, "mul_row")?;
        let xv = &self.nodes[xi].value;
        let r = self.nodes[ri].value.data();
        let c = xv.cols();
        let mut out = xv.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        Ok(self.push(out, Op::MulRow(xi, ri)))
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let out = self.nodes[ai].value.map(f64::tanh);
        self.push(out, Op::Tanh(ai))
    }

    /// GELU, tanh approximation.
    pub fn gelu_act(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let out = self.nodes[ai].value.map(gelu);
        self.push(out, Op::Gelu(ai))
    }

    /// Per-row standardization `(x − mean)/sqrt(var + eps)`, no affine.
    /// A constant row maps to zeros.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let ai = self.ix(a);
        let xv = &self.nodes[ai].value;
        let (r, c) = xv.dims2();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(out, Op::LayerNorm { x: ai, inv_std }))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let mut out = self.nodes[ai].value.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        self.push(out, Op::Softmax(ai))
    }

    /// Single-head attention `softmax(q·kᵀ/√d)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attention_grouped(q, k, v, 1, 1)
    }

    /// Batched multi-head attention.
    ///
    /// Rows of `q` (`groups·T_q`) and of `k`/`v` (`groups·T_k`) are split into
    /// `groups` contiguous sequences that never attend across each other;
    /// columns are split into `heads` equal slices.
    pub fn attention_grouped(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qi, ki, vi) = (self.ix(q), self.ix(k), self.ix(v));
        let (qv, kv, vv) = (
            &self.nodes[qi].value,
            &self.nodes[ki].value,
            &self.nodes[vi].value,
        );
        let (rq, d) = qv.dims2();
        let (rk, dk) = kv.dims2();
        if d != dk || groups == 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention(q,k)", qv.shape(), kv.shape()));
        }
        if vv.dims2() != (rk, d) {
            return Err(Error::shape("attention(k,v)", kv.shape(), vv.shape()));
        }
        if rq % groups != 0 || rk % groups != 0 {
            return Err(Error::invalid(format!(
                "attention rows {rq}/{rk} not divisible into {groups} groups"
            )));
        }
        let (tq, tk, dh) = (rq / groups, rk / groups, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; groups * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        for g in 0..groups {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * tq * tk..][..tq * tk];
                for i in 0..tq {
                    let qrow = &qd[(g * tq + i) * d + h * dh..][..dh];
                    let prow = &mut p[i * tk..(i + 1) * tk];
                    for (j, pv) in prow.iter_mut().enumerate() {
                        let krow = &kd[(g * tk + j) * d + h * dh..][..dh];
                        *pv = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_row(prow);
                    let orow = &mut out[(g * tq + i) * d + h * dh..][..dh];
                    for (j, &pv) in prow.iter().enumerate() {
                        let vrow = &vd[(g * tk + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += pv * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::matrix(rq, d, out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                groups,
                heads,
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xi = self.ix(x);
        let xv = &self.nodes[xi].value;
        if idx.is_empty() || idx.iter().any(|&i| i >= xv.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows index out of range for {:?}",
                xv.shape()
            )));
        }
        let out = xv.gather_rows(&idx);
        Ok(self.push(out, Op::GatherRows { x: xi, idx }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids: Vec<usize> = parts.iter().map(|&p| self.ix(p)).collect();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &self.nodes[i].value).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push(out, Op::ConcatRows(ids)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let s = self.nodes[ai].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(ai))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let s = self.nodes[ai].value.mean();
        self.push(Tensor::scalar(s), Op::Mean(ai))
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let ai = self.ix(a);
        let t = &self.nodes[ai].value;
        let s = t.sq_norm() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanSquare(ai))
    }

    /// `mean((a − b)²)` over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        Ok(self.mean_square(d))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::invalid("loss is not a node of this tape"));
        }
        let root = &self.nodes[loss.idx].value;
        if root.numel() != 1 {
            return Err(Error::invalid(format!(
                "loss must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.idx] = Some(Tensor::full(root.shape(), 1.0));

        for i in (0..=loss.idx).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        let n_params = self.params.map(ParamSet::len).unwrap_or(0);
        let mut pgrads = vec![None; n_params];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                pgrads[pid.0] = Some(
                    grads[i]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                );
            }
        }
        Ok(Grads {
            graph: self.id,
            nodes: grads,
            params: Gradients::new(pgrads),
        })
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, g: Tensor| match &mut grads[j] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = av.dims2();
                let n = bv.cols();
                let mut ga = vec![0.0; m * k];
                gemm_nt(gout.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                gemm_tn(av.data(), gout.data(), &mut gb, m, k, n);
                acc(a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                acc(b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            &Op::MatMulNT(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (av, bv) = (val(a), val(b));
                let (m, k) = av.dims2();
                let n = bv.rows();
                let mut ga = vec![0.0; m * k];
                gemm_nn(gout.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; n * k];
                gemm_tn(gout.data(), av.data(), &mut gb, m, n, k);
                acc(a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                acc(b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            &Op::Add(a, b) => {
                acc(a, gout.clone());
                acc(b, gout.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, gout.clone());
                acc(b, gout.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                acc(a, gout.mul(val(b)).unwrap());
                acc(b, gout.mul(val(a)).unwrap());
            }
            &Op::Scale(a, c) => acc(a, gout.scale(c)),
            &Op::AddRow(x, r) => {
                let c = gout.cols();
                let mut gr = vec![0.0; c];
                for (j, g) in gout.data().iter().enumerate() {
                    gr[j % c] += g;
                }
                acc(x, gout.clone());
                acc(r, Tensor::new(val(r).shape().to_vec(), gr).unwrap());
            }
            &Op::MulRow(x, r) => {
                let (xv, rv) = (val(x), val(r));
                let c = gout.cols();
                let mut gx = gout.clone();
                let mut gr = vec![0.0; c];
                for (j, g) in gx.data_mut().iter_mut().enumerate() {
                    gr[j % c] += *g * xv.data()[j];
                    *g *= rv.data()[j % c];
                }
                acc(x, gx);
                acc(r, Tensor::new(rv.shape().to_vec(), gr).unwrap());
            }
            &Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(a, gout.zip_with(y, "tanh'", |g, y| g * (1.0 - y * y)).unwrap());
            }
            &Op::Gelu(a) => {
                acc(a, gout.zip_with(val(a), "gelu'", |g, x| g * gelu_grad(x)).unwrap());
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut gx = gout.clone();
                for ((grow, yrow), &is) in gx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(inv_std)
                {
                    let mg = grow.iter().sum::<f64>() / c as f64;
                    let mgy = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                    for (g, &yv) in grow.iter_mut().zip(yrow) {
                        *g = is * (*g - mg - yv * mgy);
                    }
                }
                acc(*x, gx);
            }
            &Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                let mut gx = gout.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>();
                    for (g, &yv) in grow.iter_mut().zip(yrow) {
                        *g = yv * (*g - dot);
                    }
                }
                acc(a, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (rq, d) = qv.dims2();
                let rk = kv.rows();
                let (tq, tk, dh) = (rq / groups, rk / groups, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd, go) = (qv.data(), kv.data(), vv.data(), gout.data());
                let mut gq = vec![0.0; rq * d];
                let mut gk = vec![0.0; rk * d];
                let mut gv = vec![0.0; rk * d];
                let mut dp = vec![0.0; tk];
                for g in 0..*groups {
                    for h in 0..*heads {
                        let p = &probs[(g * heads + h) * tq * tk..][..tq * tk];
                        for i in 0..tq {
                            let prow = &p[i * tk..(i + 1) * tk];
                            let gorow = &go[(g * tq + i) * d + h * dh..][..dh];
                            for j in 0..tk {
                                let voff = (g * tk + j) * d + h * dh;
                                dp[j] = gorow.iter().zip(&vd[voff..voff + dh]).map(|(a, b)| a * b).sum();
                                for (gvv, &gg) in gv[voff..voff + dh].iter_mut().zip(gorow) {
                                    *gvv += prow[j] * gg;
                                }
                            }
                            let dot: f64 = dp.iter().zip(prow).map(|(a, b)| a * b).sum();
                            let qoff = (g * tq + i) * d + h * dh;
                            for j in 0..tk {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (g * tk + j) * d + h * dh;
                                for t in 0..dh {
                                    gq[qoff + t] += ds * kd[koff + t];
                                    gk[koff + t] += ds * qd[qoff + t];
                                }
                            }
                        }
                    }
                }
                acc(*q, Tensor::new(qv.shape().to_vec(), gq).unwrap());
                acc(*k, Tensor::new(kv.shape().to_vec(), gk).unwrap());
                acc(*v, Tensor::new(vv.shape().to_vec(), gv).unwrap());
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[src * c..(src + 1) * c];
                    for (d, g) in dst.iter_mut().zip(&gout.data()[r * c..(r + 1) * c]) {
                        *d += g;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let g = Tensor::new(val(p).shape().to_vec(), gout.data()[off..off + n].to_vec())
                        .unwrap();
                    off += n;
                    acc(p, g);
                }
            }
            &Op::Sum(a) => acc(a, Tensor::full(val(a).shape(), gout.item())),
            &Op::Mean(a) => {
                let n = val(a).numel() as f64;
                acc(a, Tensor::full(val(a).shape(), gout.item() / n));
            }
            &Op::MeanSquare(a) => {
                let n = val(a).numel() as f64;
                let c = 2.0 * gout.item() / n;
                acc(a, val(a).scale(c));
            }
        }
    }
}
