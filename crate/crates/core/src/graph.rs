//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node whose inputs already exist, so creation
//! order is a topological order and backward is a single reverse sweep.

use std::sync::Arc;

use crate::attention::kernel as na_kernel;
use crate::attention::NeighborhoodPlan;
use crate::error::{Error, Result};
use crate::tensor::{c, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Node handle inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Sum(Var),
    SumRows(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Concat(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
        probs: Vec<T>,
    },
    Neighborhood {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        plan: Arc<NeighborhoodPlan>,
        heads: usize,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::SumRows(x)
            | Op::Reshape(x)
            | Op::Gather { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Neighborhood { q, k, v, bias, .. } => {
                let mut ins = vec![*q, *k, *v];
                ins.extend(bias);
                ins
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph. Parameters and constants enter as leaves; grads for
/// leaves accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`].
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcasts(sa, sb) {
            return Err(Error::Shape {
                op: kind_name(kind),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len();
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % nb];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 2 || *sx.last().unwrap() != sw[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let m = self.value(x).numel() / k;
        let mut out_shape = sx.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let out = matmul_kernel(self.value(x).data(), self.value(w).data(), m, k, n);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(x, w)))
    }

    /// `x · w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                if self.shape(b) != [self.shape(w)[1]] {
                    return Err(Error::Shape {
                        op: "linear bias",
                        lhs: self.shape(w).to_vec(),
                        rhs: self.shape(b).to_vec(),
                    });
                }
                self.add(y, b)
            }
            None => Ok(y),
        }
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        let value = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(value, Op::Softmax(x))
    }

    /// LayerNorm over the last axis with population variance and
    /// `eps = 1e-5` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        let inv_d = 1.0 / d as f64;
        for row in xv.data().chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() * inv_d;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() * inv_d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(c(is));
            for (j, &v) in row.iter().enumerate() {
                let h = (v.as_f64() - mean) * is;
                xhat.push(c(h));
                out.push(c(gv[j].as_f64() * h + bv[j].as_f64()));
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        self.push(value, Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(Tensor::scalar(c(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / c(n as f64))
    }

    /// Sum over every axis but the last: `[..., d] -> [d]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = vec![0.0; d];
        for row in xv.data().chunks(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v.as_f64();
            }
        }
        let out = out.into_iter().map(c).collect();
        self.push(Tensor::new(vec![d], out).unwrap(), Op::SumRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `out[i] = x[index[i]]` with the given output shape. Every spatial
    /// rearrangement (patch extraction, merge, expand) goes through here.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                xv.len()
            )));
        }
        let out = index.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(value, Op::Gather { x, index }))
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::Shape {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.chunks(da).zip(bv.chunks(db)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(a, b)))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<[usize]>) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.last_dim();
        if targets.len() != lv.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (row, (p, &t)) in lv
            .data()
            .chunks(classes)
            .zip(probs.chunks_mut(classes).zip(targets.iter()))
        {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let max = max.as_f64();
            let lse = row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t].as_f64();
            softmax_in_place(p);
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(c(loss)),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Multi-head neighborhood attention over pre-projected `q`, `k`, `v`
    /// of shape `[tokens, heads * head_dim]`.
    pub fn neighborhood_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        plan: Arc<NeighborhoodPlan>,
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::Shape {
                op: "neighborhood_attention",
                lhs: shape,
                rhs: self.shape(k).to_vec(),
            });
        }
        let dim = *shape.last().unwrap();
        if shape.len() != 2 || shape[0] != plan.tokens() || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "attention input {shape:?} incompatible with {} tokens and {heads} heads",
                plan.tokens()
            )));
        }
        if let Some(b) = bias {
            let expected = [heads, plan.bias_table_len()];
            if self.shape(b) != expected {
                return Err(Error::Shape {
                    op: "positional bias",
                    lhs: expected.to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (out, weights) = na_kernel::forward(
            &plan,
            heads,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Neighborhood {
                q,
                k,
                v,
                bias,
                plan,
                heads,
                weights,
            },
        ))
    }

    /// Saved attention weights of a neighborhood attention node, laid out
    /// per neighbor slot then per head.
    pub fn attention_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Neighborhood { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        // Intermediate grads from any previous sweep are stale.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                accumulate(&mut self.grads[id], gout);
                continue;
            }
            self.backward_node(id, &gout, &mut pending);
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, gout: &[T], pending: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let nb = bv.len();
                if wants(*a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => gout.to_vec(),
                        BinaryKind::Mul => gout.iter().enumerate().map(|(i, &g)| g * bv[i % nb]).collect(),
                        BinaryKind::Div => gout.iter().enumerate().map(|(i, &g)| g / bv[i % nb]).collect(),
                    };
                    accumulate(&mut pending[a.0], ga);
                }
                if wants(*b) {
                    let mut gb = vec![T::zero(); nb];
                    for (i, &g) in gout.iter().enumerate() {
                        let j = i % nb;
                        gb[j] = gb[j]
                            + match kind {
                                BinaryKind::Add => g,
                                BinaryKind::Sub => -g,
                                BinaryKind::Mul => g * av[i],
                                BinaryKind::Div => -g * av[i] / (bv[j] * bv[j]),
                            };
                    }
                    accumulate(&mut pending[b.0], gb);
                }
            }
            Op::Scale(x, s) => {
                accumulate(&mut pending[x.0], gout.iter().map(|&g| g * *s).collect());
            }
            Op::MatMul(x, w) => {
                let sw = self.nodes[w.0].value.shape();
                let (k, n) = (sw[0], sw[1]);
                let xv = val(*x);
                let m = xv.len() / k;
                if wants(*x) {
                    let wv = val(*w);
                    let mut gx = vec![T::zero(); m * k];
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let wrow = &wv[p * n..(p + 1) * n];
                            gx[i * k + p] = dot(go, wrow);
                        }
                    }
                    accumulate(&mut pending[x.0], gx);
                }
                if wants(*w) {
                    let mut gw = vec![0.0f64; k * n];
                    for i in 0..m {
                        let go = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a = xv[i * k + p].as_f64();
                            if a == 0.0 {
                                continue;
                            }
                            for (g, &o) in gw[p * n..(p + 1) * n].iter_mut().zip(go) {
                                *g += a * o.as_f64();
                            }
                        }
                    }
                    accumulate(&mut pending[w.0], narrow(gw));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut gx = vec![T::zero(); y.len()];
                for ((gxr, yr), gr) in gx.chunks_mut(d).zip(y.chunks(d)).zip(gout.chunks(d)) {
                    let s = dot(yr, gr);
                    for j in 0..d {
                        gxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(&mut pending[x.0], gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gv = val(*gamma);
                if wants(*gamma) || wants(*beta) {
                    let mut gg = vec![0.0f64; d];
                    let mut gb = vec![0.0f64; d];
                    for (hr, gr) in xhat.chunks(d).zip(gout.chunks(d)) {
                        for j in 0..d {
                            gg[j] += (gr[j] * hr[j]).as_f64();
                            gb[j] += gr[j].as_f64();
                        }
                    }
                    if wants(*gamma) {
                        accumulate(&mut pending[gamma.0], narrow(gg));
                    }
                    if wants(*beta) {
                        accumulate(&mut pending[beta.0], narrow(gb));
                    }
                }
                if wants(*x) {
                    let inv_d = 1.0 / d as f64;
                    let mut gx = vec![T::zero(); xhat.len()];
                    for (r, ((gxr, hr), gr)) in gx
                        .chunks_mut(d)
                        .zip(xhat.chunks(d))
                        .zip(gout.chunks(d))
                        .enumerate()
                    {
                        let mut mean_g = 0.0;
                        let mut mean_gh = 0.0;
                        for j in 0..d {
                            let dh = gr[j].as_f64() * gv[j].as_f64();
                            mean_g += dh;
                            mean_gh += dh * hr[j].as_f64();
                        }
                        mean_g *= inv_d;
                        mean_gh *= inv_d;
                        let is = inv_std[r].as_f64();
                        for j in 0..d {
                            let dh = gr[j].as_f64() * gv[j].as_f64();
                            gxr[j] = c(is * (dh - mean_g - hr[j].as_f64() * mean_gh));
                        }
                    }
                    accumulate(&mut pending[x.0], gx);
                }
            }
            Op::Gelu(x) => {
                let gx = val(*x)
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| g * gelu_grad_scalar(v))
                    .collect();
                accumulate(&mut pending[x.0], gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                accumulate(&mut pending[x.0], vec![gout[0]; n]);
            }
            Op::SumRows(x) => {
                let n = self.nodes[x.0].value.numel();
                let d = gout.len();
                accumulate(&mut pending[x.0], (0..n).map(|i| gout[i % d]).collect());
            }
            Op::Reshape(x) => accumulate(&mut pending[x.0], gout.to_vec()),
            Op::Gather { x, index } => {
                let mut gx = vec![0.0f64; self.nodes[x.0].value.numel()];
                for (&i, &g) in index.iter().zip(gout) {
                    gx[i] += g.as_f64();
                }
                accumulate(&mut pending[x.0], narrow(gx));
            }
            Op::Concat(a, b) => {
                let da = self.nodes[a.0].value.last_dim();
                let db = self.nodes[b.0].value.last_dim();
                let mut ga = Vec::with_capacity(self.nodes[a.0].value.numel());
                let mut gb = Vec::with_capacity(self.nodes[b.0].value.numel());
                for row in gout.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                if wants(*a) {
                    accumulate(&mut pending[a.0], ga);
                }
                if wants(*b) {
                    accumulate(&mut pending[b.0], gb);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.nodes[logits.0].value.last_dim();
                let s = gout[0] / c(targets.len() as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (row, &t) in gl.chunks_mut(classes).zip(targets.iter()) {
                    row[t] = row[t] - s;
                }
                accumulate(&mut pending[logits.0], gl);
            }
            Op::Neighborhood {
                q,
                k,
                v,
                bias,
                plan,
                heads,
                weights,
            } => {
                let grads = na_kernel::backward(
                    plan,
                    *heads,
                    val(*q),
                    val(*k),
                    val(*v),
                    weights,
                    gout,
                    bias.is_some() && wants(bias.unwrap()),
                );
                if wants(*q) {
                    accumulate(&mut pending[q.0], grads.dq);
                }
                if wants(*k) {
                    accumulate(&mut pending[k.0], grads.dk);
                }
                if wants(*v) {
                    accumulate(&mut pending[v.0], grads.dv);
                }
                if let (Some(b), Some(db)) = (bias, grads.dbias) {
                    accumulate(&mut pending[b.0], db);
                }
            }
        }
    }
}

fn kind_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

/// `b` broadcasts onto `a` when it equals `a` or is a trailing suffix of it.
fn broadcasts(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
        None => *slot = Some(contrib),
    }
}

// Reductions accumulate in f64 whatever the storage width, then round once.

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    c(dot_wide(a, b))
}

#[inline]
pub(crate) fn dot_wide<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (&x, &y)| s + x.as_f64() * y.as_f64())
}

pub(crate) fn narrow<T: Scalar>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(c).collect()
}

pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            for (o, &w) in acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * w.as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| c::<T>(v)));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
    let mut wide: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let inv = 1.0 / wide.iter().sum::<f64>();
    wide.iter_mut().for_each(|v| *v *= inv);
    row.iter_mut().zip(wide).for_each(|(r, w)| *r = c(w));
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = c::<T>(0.5);
    x * half * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = c::<T>(0.5);
    let cdf = half * (T::one() + (x * c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
