//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Nodes are appended in creation order, so walking the tape backwards is a
//! valid reverse topological traversal. The tape is meant to be discarded
//! after [`Graph::backward`].

use std::collections::BTreeMap;

use super::params::ParameterStore;
use super::tensor::{gemm, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Reshape(Var),
    Swap01(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var, usize),
    LagSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LagScores {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        slope: f64,
        per_node: bool,
        pre: Vec<f64>,
    },
    LagMix {
        alpha: Var,
        z: Var,
        stride: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the sigmoid backward rule by 1.5.
    SigmoidBackward,
    /// Scales the layer-norm gain gradient by 1.5.
    LayerNormGain,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    fault: Option<Fault>,
}

/// Gradients of a scalar with respect to every parameter registered on the
/// tape, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Number of valid lags for position `t` with lag stride `stride`.
#[inline]
pub(crate) fn lag_count(t: usize, stride: usize) -> usize {
    t / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            fault: Some(fault),
            ..Self::default()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers the named parameter on the tape. Repeated calls with the
    /// same name return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Adds a rank-1 bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        let c = *xs.shape().last().unwrap();
        if bs.len() != c {
            return Err(dim_err(format!(
                "bias {:?} does not match last axis of {:?}",
                bs.shape(),
                xs.shape()
            )));
        }
        let b = bs.data();
        let mut out = xs.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// (a, b, c) -> (b, a, c)
    pub fn swap01(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).swap01()?;
        Ok(self.push(out, Op::Swap01(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    /// Elementwise square root of a nonnegative tensor. The backward rule
    /// at exactly zero is defined as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = t.map(f64::sqrt);
        Ok(self.push(out, Op::Sqrt(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| leaky(v, slope));
        self.push(out, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(dim_err(format!(
                "softmax axis {axis} out of range for {:?}",
                t.shape()
            )));
        }
        let (outer, extent, inner) = t.axis_split(axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..extent {
                    let e = (d[idx(k)] - max).exp();
                    d[idx(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    d[idx(k)] /= total;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Row softmax over square (L, L) lag matrices, or a (B, L, L) stack of
    /// them, restricted to the causal lags `i` with `i * stride <= t` for
    /// row `t`. Masked entries are exactly zero.
    pub fn lag_softmax(&mut self, x: Var, stride: usize) -> Result<Var> {
        let t = self.value(x);
        let l = square_side(t)?;
        let mut out = Tensor::zeros(t.shape());
        for (block, row) in (0..t.len() / (l * l)).flat_map(|b| (0..l).map(move |r| (b, r))) {
            let n = lag_count(row, stride).min(l);
            let start = (block * l + row) * l;
            let src = &t.data()[start..start + n];
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out.data_mut()[start..start + n];
            let mut total = 0.0;
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = (s - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        Ok(self.push(out, Op::LagSoftmax(x, stride), &[x]))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return Err(dim_err(format!(
                "layer_norm gain {:?} / bias {:?} do not match last axis of {:?}",
                g.shape(),
                b.shape(),
                t.shape()
            )));
        }
        let rows = t.len() / d;
        let mut normalized = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = t.clone();
        for r in 0..rows {
            let slice = &t.data()[r * d..(r + 1) * d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (slice[c] - mean) * is;
                normalized[r * d + c] = xh;
                out.data_mut()[r * d + c] = g.data()[c] * xh + b.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Attention logits over causal lags.
    ///
    /// `x` is (L, N, C), `weight` holds 2C values (the first C score the
    /// query slice, the last C the lagged slice) and `bias` one value. With
    /// `per_node` the result is (N, L, L) with entry `[n, t, i]` equal to
    /// `leaky(w_q·x[t,n] + w_k·x[t - i*stride, n] + b)`; otherwise it is
    /// (L, L) holding the node-average of the same quantity. Invalid lags
    /// are 0.
    pub fn lag_scores(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        slope: f64,
        per_node: bool,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Contract("lag stride must be positive".into()));
        }
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(dim_err(format!("lag_scores expects (L, N, C), got {:?}", xt.shape())));
        }
        let (l, n, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let w = self.value(weight);
        let b = self.value(bias);
        if w.len() != 2 * c || b.len() != 1 {
            return Err(dim_err(format!(
                "score weight {:?} / bias {:?} do not fit {c} channels",
                w.shape(),
                b.shape()
            )));
        }
        let (wq, wk) = w.data().split_at(c);
        let project = |wv: &[f64]| -> Vec<f64> {
            xt.data()
                .chunks(c)
                .map(|row| row.iter().zip(wv).map(|(a, b)| a * b).sum())
                .collect()
        };
        let u = project(wq);
        let v = project(wk);
        let b0 = b.data()[0];
        let mut pre = vec![0.0; l * l * n];
        let mut out = if per_node {
            Tensor::zeros(&[n, l, l])
        } else {
            Tensor::zeros(&[l, l])
        };
        for t in 0..l {
            for i in 0..lag_count(t, stride).min(l) {
                let src = t - i * stride;
                let mut acc = 0.0;
                for node in 0..n {
                    let p = u[t * n + node] + v[src * n + node] + b0;
                    pre[(t * l + i) * n + node] = p;
                    if per_node {
                        out.data_mut()[(node * l + t) * l + i] = leaky(p, slope);
                    } else {
                        acc += leaky(p, slope);
                    }
                }
                if !per_node {
                    out.data_mut()[t * l + i] = acc / n as f64;
                }
            }
        }
        Ok(self.push(
            out,
            Op::LagScores {
                x,
                weight,
                bias,
                stride,
                slope,
                per_node,
                pre,
            },
            &[x, weight, bias],
        ))
    }

    /// `out[t, n, :] = Σ_i alpha[t, i] · z[t - i*stride, n, :]` over valid
    /// lags. A (N, L, L) `alpha` gives each node its own weights.
    pub fn lag_mix(&mut self, alpha: Var, z: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Contract("lag stride must be positive".into()));
        }
        let a = self.value(alpha);
        let zt = self.value(z);
        let l = square_side(a)?;
        let per_node = a.rank() == 3;
        if zt.rank() != 3 || zt.shape()[0] != l || (per_node && a.shape()[0] != zt.shape()[1]) {
            return Err(dim_err(format!(
                "lag_mix: alpha {:?} incompatible with {:?}",
                a.shape(),
                zt.shape()
            )));
        }
        let (n, d) = (zt.shape()[1], zt.shape()[2]);
        let mut out = Tensor::zeros(zt.shape());
        for t in 0..l {
            for i in 0..lag_count(t, stride).min(l) {
                let src = t - i * stride;
                for node in 0..n {
                    let w = if per_node {
                        a.data()[(node * l + t) * l + i]
                    } else {
                        a.data()[t * l + i]
                    };
                    if w == 0.0 {
                        continue;
                    }
                    let (so, dst_o) = ((src * n + node) * d, (t * n + node) * d);
                    for k in 0..d {
                        let v = zt.data()[so + k];
                        out.data_mut()[dst_o + k] += w * v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::LagMix { alpha, z, stride }, &[alpha, z]))
    }

    /// `leaky_relu(x · W + b, slope)` over the last axis of `x`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var, slope: f64) -> Result<Var> {
        let pre = self.linear(x, weight, bias)?;
        Ok(self.leaky_relu(pre, slope))
    }

    /// `x · W + b` over the last axis of `x` (any rank).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xy = self.matmul_last(x, weight)?;
        self.add_bias(xy, bias)
    }

    /// Multiplies the last axis of `x` by a rank-2 `weight`, flattening the
    /// leading axes.
    pub fn matmul_last(&mut self, x: Var, weight: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(dim_err(format!(
                "fully connected: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        if xs.len() == 2 {
            return self.matmul(x, weight);
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let y = self.matmul(flat, weight)?;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse sweep from a one-element `loss`. Every parameter registered
    /// on the tape receives an entry; unreachable ones get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
        }
        let mut out = Gradients::new();
        for (name, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].requires_grad {
                    let c = self.value(*bias).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*bias).shape(), gb)?;
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.matmul(&bv.transpose_last()?)?);
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, matmul_tn(av, g)?);
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.value(*x).shape())?);
            }
            Op::Swap01(x) => self.accumulate(grads, *x, g.swap01()?),
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose_last()?),
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.value(x).shape()[*axis];
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(grads, x, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let (outer, extent, inner) = xv.axis_split(*axis);
                let len = g.shape()[*axis];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.value(*x).shape(), s));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), s));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, g.zip_map(xv, |gv, v| 2.0 * v * gv)?);
            }
            Op::Sqrt(x) => {
                let gx = g.zip_map(y, |gv, r| if r > 0.0 { gv / (2.0 * r) } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                let gx = g.zip_map(xv, |gv, v| if v > 0.0 { gv } else { gv * slope })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let k = if self.fault == Some(Fault::SigmoidBackward) {
                    1.5
                } else {
                    1.0
                };
                let gx = g.zip_map(y, |gv, s| k * gv * s * (1.0 - s))?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let (outer, extent, inner) = y.axis_split(*axis);
                let mut gx = Tensor::zeros(y.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * extent + k) * inner + i;
                        let dot: f64 = (0..extent).map(|k| g.data()[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..extent {
                            gx.data_mut()[idx(k)] = y.data()[idx(k)] * (g.data()[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LagSoftmax(x, stride) => {
                let l = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for (block, row) in (0..y.len() / (l * l)).flat_map(|b| (0..l).map(move |r| (b, r))) {
                    let n = lag_count(row, *stride).min(l);
                    let start = (block * l + row) * l;
                    let r = start..start + n;
                    let (gy, yy) = (&g.data()[r.clone()], &y.data()[r.clone()]);
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for (k, o) in gx.data_mut()[r].iter_mut().enumerate() {
                        *o = yy[k] * (gy[k] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let gain_v = self.value(*gain).data();
                let d = gain_v.len();
                let rows = inv_std.len();
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xh = &normalized[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..d {
                        gg[c] += gr[c] * xh[c];
                        gbias[c] += gr[c];
                        let dxh = gr[c] * gain_v[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[c];
                    }
                    let scale = inv_std[r] / d as f64;
                    let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for c in 0..d {
                        let dxh = gr[c] * gain_v[c];
                        dst[c] = scale * (d as f64 * dxh - sum_dxh - xh[c] * sum_dxh_xh);
                    }
                }
                self.accumulate(grads, *x, gx);
                if self.fault == Some(Fault::LayerNormGain) {
                    gg.iter_mut().for_each(|v| *v *= 1.5);
                }
                let shape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(&shape, gg)?);
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(&shape, gbias)?);
            }
            Op::LagScores {
                x,
                weight,
                bias,
                stride,
                slope,
                per_node,
                pre,
            } => {
                let xt = self.value(*x);
                let (l, n, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
                let w = self.value(*weight).data();
                let (wq, wk) = w.split_at(c);
                // Gradients w.r.t. the per-(t, node) query and key projections.
                let mut du = vec![0.0; l * n];
                let mut dv = vec![0.0; l * n];
                let mut db = 0.0;
                for t in 0..l {
                    for i in 0..lag_count(t, *stride).min(l) {
                        let src = t - i * stride;
                        let shared = g.data()[t * l + i] / n as f64;
                        for node in 0..n {
                            let gs = if *per_node {
                                g.data()[(node * l + t) * l + i]
                            } else {
                                shared
                            };
                            if gs == 0.0 {
                                continue;
                            }
                            let p = pre[(t * l + i) * n + node];
                            let dp = if p > 0.0 { gs } else { gs * slope };
                            du[t * n + node] += dp;
                            dv[src * n + node] += dp;
                            db += dp;
                        }
                    }
                }
                let mut gw = vec![0.0; 2 * c];
                let mut gx = Tensor::zeros(xt.shape());
                for (r, row) in xt.data().chunks(c).enumerate() {
                    let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for k in 0..c {
                        gw[k] += du[r] * row[k];
                        gw[c + k] += dv[r] * row[k];
                        dst[k] = du[r] * wq[k] + dv[r] * wk[k];
                    }
                }
                self.accumulate(grads, *x, gx);
                let shape = self.value(*weight).shape().to_vec();
                self.accumulate(grads, *weight, Tensor::new(&shape, gw)?);
                let shape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::filled(&shape, db));
            }
            Op::LagMix { alpha, z, stride } => {
                let a = self.value(*alpha);
                let zt = self.value(*z);
                let l = *a.shape().last().unwrap();
                let per_node = a.rank() == 3;
                let (n, d) = (zt.shape()[1], zt.shape()[2]);
                let mut ga = Tensor::zeros(a.shape());
                let mut gz = Tensor::zeros(zt.shape());
                for t in 0..l {
                    for i in 0..lag_count(t, *stride).min(l) {
                        let src = t - i * stride;
                        for node in 0..n {
                            let ai = if per_node { (node * l + t) * l + i } else { t * l + i };
                            let (so, go) = ((src * n + node) * d, (t * n + node) * d);
                            let gt = &g.data()[go..go + d];
                            let dot: f64 = gt.iter().zip(&zt.data()[so..so + d]).map(|(p, q)| p * q).sum();
                            ga.data_mut()[ai] += dot;
                            let w = a.data()[ai];
                            for (o, gv) in gz.data_mut()[so..so + d].iter_mut().zip(gt) {
                                *o += w * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *alpha, ga);
                self.accumulate(grads, *z, gz);
            }
        }
        Ok(())
    }
}

/// `aᵀ · g` for rank-2 or batched rank-3 operands.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    match a.rank() {
        2 => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = g.shape()[1];
            let at = a.transpose_last()?;
            let mut out = vec![0.0; k * n];
            gemm(at.data(), g.data(), &mut out, k, m, n);
            Tensor::new(&[k, n], out)
        }
        _ => a.transpose_last()?.matmul(g),
    }
}

fn square_side(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [a, b] | [_, a, b] if a == b => Ok(*a),
        s => Err(dim_err(format!("expected a square lag matrix, got {s:?}"))),
    }
}

#[inline]
pub fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v * slope
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
