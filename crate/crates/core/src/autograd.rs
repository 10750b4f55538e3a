//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Nodes that cannot reach a parameter are never
//! differentiated. Batch-parallel kernels reduce per-sample partial gradients
//! in sample order, so results do not depend on the thread count.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Mean and inverse standard deviation of one row.
fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    GatherRows(Var, Vec<usize>),
    RowScale(Var, Vec<f64>),
    ConcatRows(Vec<Var>),
    RowL2Norm(Var),
    RowStandardize {
        x: Var,
        eps: f64,
    },
    Bce {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    SoftCe {
        pred: Var,
        target: Tensor,
        eps: f64,
    },
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a model parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// The leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Parameters touched by this graph, in id order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// 2-D convolution. `x`: `[n,h,w,ci]`, `w`: `[k,k,ci,co]`, `b`: `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad);
        let ng = self.ng(&[x, w, b]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Affine map. `x`: `[n,k]`, `w`: `[k,m]`, `b`: `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value = linear_forward(self.value(x), self.value(w), self.value(b));
        let ng = self.ng(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let ng = self.ng(&[x]);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let ng = self.ng(&[x]);
        self.push(value, Op::Sigmoid(x), ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let k = *t.shape().last().expect("softmax of a scalar");
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(k) {
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
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// `x[..., start..start+len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let k = *t.shape().last().expect("slice of a scalar");
        assert!(start + len <= k, "slice_last out of range");
        let mut data = Vec::with_capacity(t.numel() / k * len);
        for row in t.data().chunks(k) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::SliceLast { x, start }, ng)
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        let lead: Vec<usize> = self.shape(xs[0]).split_last().unwrap().1.to_vec();
        let widths: Vec<usize> = xs.iter().map(|&v| *self.shape(v).last().unwrap()).collect();
        for &v in xs {
            assert_eq!(self.shape(v).split_last().unwrap().1, &lead[..]);
        }
        let total: usize = widths.iter().sum();
        let outer: usize = lead.iter().product();
        let mut data = Vec::with_capacity(outer * total);
        for r in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data).unwrap();
        let ng = self.ng(xs);
        self.push(value, Op::ConcatLast(xs.to_vec()), ng)
    }

    /// `[n,h,w,c] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let out = &mut data[i * c..(i + 1) * c];
            for px in t.row(i).chunks(c) {
                for (o, v) in out.iter_mut().zip(px) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= hw as f64;
            }
        }
        let value = Tensor::new(vec![n, c], data).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::GlobalAvgPool(x), ng)
    }

    /// `[n,c] -> [n,h,w,c]`, repeating every channel vector over the grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(n * h * w * c);
        for i in 0..n {
            for _ in 0..h * w {
                data.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::new(vec![n, h, w, c], data).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::BroadcastSpatial(x), ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select_rows(idx);
        let ng = self.ng(&[x]);
        self.push(value, Op::GatherRows(x, idx.to_vec()), ng)
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn row_scale(&mut self, x: Var, scales: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.rows(), scales.len());
        let len = t.row_len();
        let mut out = t.clone();
        for (row, &s) in out.data_mut().chunks_mut(len).zip(scales) {
            for v in row {
                *v *= s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::RowScale(x, scales.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let ts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_rows(&ts).expect("concat_rows shape");
        let ng = self.ng(xs);
        self.push(value, Op::ConcatRows(xs.to_vec()), ng)
    }

    /// Euclidean norm of every leading-dimension slice: `[n,...] -> [n]`.
    pub fn row_l2_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = (0..t.rows())
            .map(|i| t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(vec![data.len()], data).unwrap();
        let ng = self.ng(&[x]);
        self.push(value, Op::RowL2Norm(x), ng)
    }

    /// Standardizes each sample to zero mean and unit variance over all of
    /// its elements: `(x - mean) / sqrt(var + eps)`.
    pub fn row_standardize(&mut self, x: Var, eps: f64) -> Var {
        let mut value = self.value(x).clone();
        let len = value.row_len();
        for row in value.data_mut().chunks_mut(len) {
            let (mean, inv) = row_moments(row, eps);
            for v in row {
                *v = (*v - mean) * inv;
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::RowStandardize { x, eps }, ng)
    }

    /// Per-row summed binary cross-entropy of probabilities `pred` (clamped to
    /// `[eps, 1-eps]`) against soft targets: `[n,k] -> [n]`.
    pub fn bce_rows(&mut self, pred: Var, target: &Tensor, eps: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "bce target shape");
        let k = p.row_len();
        let data: Vec<f64> = p
            .data()
            .chunks(k)
            .zip(target.data().chunks(k))
            .map(|(pr, tr)| {
                pr.iter()
                    .zip(tr)
                    .map(|(&p, &t)| {
                        let p = p.clamp(eps, 1.0 - eps);
                        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                    })
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![data.len()], data).unwrap();
        let ng = self.ng(&[pred]);
        self.push(
            value,
            Op::Bce {
                pred,
                target: target.clone(),
                eps,
            },
            ng,
        )
    }

    /// Per-row categorical cross-entropy `-sum t log p`: `[n,k] -> [n]`.
    pub fn soft_ce_rows(&mut self, pred: Var, target: &Tensor, eps: f64) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "ce target shape");
        let k = p.row_len();
        let data: Vec<f64> = p
            .data()
            .chunks(k)
            .zip(target.data().chunks(k))
            .map(|(pr, tr)| {
                pr.iter()
                    .zip(tr)
                    .map(|(&p, &t)| -t * p.clamp(eps, 1.0 - eps).ln())
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![data.len()], data).unwrap();
        let ng = self.ng(&[pred]);
        self.push(
            value,
            Op::SoftCe {
                pred,
                target: target.clone(),
                eps,
            },
            ng,
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let ng = self.ng(&[x]);
        self.push(value, Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(value, Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |g, y| g * y), grads);
                }
                if wants(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |g, x| g * x), grads);
                }
            }
            Op::Scale(a, c) => acc(*a, dy.map(|g| g * c), grads),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *stride,
                    *pad,
                    wants(*x),
                    wants(*w) || wants(*b),
                );
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                if let Some((dw, db)) = dw.zip(db) {
                    acc(*w, dw, grads);
                    acc(*b, db, grads);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), dy, wants(*x));
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
                acc(*w, dw, grads);
                acc(*b, db, grads);
            }
            Op::Silu(x) => {
                let g = dy.zip_map(self.value(*x), |g, v| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                });
                acc(*x, g, grads);
            }
            Op::Sigmoid(x) => {
                let g = dy.zip_map(&node.value, |g, y| g * y * (1.0 - y));
                acc(*x, g, grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let k = *y.shape().last().unwrap();
                let mut g = dy.clone();
                for (gr, yr) in g.data_mut().chunks_mut(k).zip(y.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, yv) in gr.iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                acc(*x, g, grads);
            }
            Op::SliceLast { x, start } => {
                let xs = self.value(*x).shape();
                let k = *xs.last().unwrap();
                let len = *dy.shape().last().unwrap();
                let mut g = Tensor::zeros(xs);
                for (gr, dr) in g.data_mut().chunks_mut(k).zip(dy.data().chunks(len)) {
                    gr[*start..*start + len].copy_from_slice(dr);
                }
                acc(*x, g, grads);
            }
            Op::ConcatLast(xs) => {
                let total = *dy.shape().last().unwrap();
                let mut offset = 0;
                for &v in xs {
                    let s = self.value(v).shape();
                    let w = *s.last().unwrap();
                    if wants(v) {
                        let mut data = Vec::with_capacity(self.value(v).numel());
                        for row in dy.data().chunks(total) {
                            data.extend_from_slice(&row[offset..offset + w]);
                        }
                        acc(v, Tensor::new(s.to_vec(), data).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
                let mut g = Tensor::zeros(s);
                let inv = 1.0 / hw as f64;
                let data = g.data_mut();
                for i in 0..n {
                    let d = dy.row(i);
                    for px in data[i * hw * c..(i + 1) * hw * c].chunks_mut(c) {
                        for (o, v) in px.iter_mut().zip(d) {
                            *o = v * inv;
                        }
                    }
                }
                acc(*x, g, grads);
            }
            Op::BroadcastSpatial(x) => {
                let s = self.value(*x).shape();
                let (n, c) = (s[0], s[1]);
                let mut data = vec![0.0; n * c];
                for i in 0..n {
                    let out = &mut data[i * c..(i + 1) * c];
                    for px in dy.row(i).chunks(c) {
                        for (o, v) in out.iter_mut().zip(px) {
                            *o += v;
                        }
                    }
                }
                acc(*x, Tensor::new(s.to_vec(), data).unwrap(), grads);
            }
            Op::GatherRows(x, idx) => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                let len = g.row_len();
                let data = g.data_mut();
                for (r, &src) in idx.iter().enumerate() {
                    for (o, v) in data[src * len..(src + 1) * len].iter_mut().zip(dy.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, g, grads);
            }
            Op::RowScale(x, scales) => {
                let len = dy.row_len();
                let mut g = dy.clone();
                for (row, &s) in g.data_mut().chunks_mut(len).zip(scales) {
                    for v in row {
                        *v *= s;
                    }
                }
                acc(*x, g, grads);
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let s = self.value(v).shape();
                    let n = s[0];
                    if wants(v) {
                        let idx: Vec<usize> = (offset..offset + n).collect();
                        acc(v, dy.select_rows(&idx), grads);
                    }
                    offset += n;
                }
            }
            Op::RowL2Norm(x) => {
                let xt = self.value(*x);
                let mut g = xt.clone();
                let len = g.row_len();
                for (i, row) in g.data_mut().chunks_mut(len).enumerate() {
                    let norm = node.value.data()[i];
                    let scale = if norm > 0.0 { dy.data()[i] / norm } else { 0.0 };
                    for v in row {
                        *v *= scale;
                    }
                }
                acc(*x, g, grads);
            }
            Op::RowStandardize { x, eps } => {
                let xt = self.value(*x);
                let len = xt.row_len();
                let mut g = dy.clone();
                for ((gr, xr), yr) in g
                    .data_mut()
                    .chunks_mut(len)
                    .zip(xt.data().chunks(len))
                    .zip(node.value.data().chunks(len))
                {
                    let (_, inv) = row_moments(xr, *eps);
                    let n = len as f64;
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (gv, &yv) in gr.iter_mut().zip(yr) {
                        *gv = inv * (*gv - mean_g - yv * mean_gy);
                    }
                }
                acc(*x, g, grads);
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred);
                let k = p.row_len();
                let mut g = p.clone();
                for (r, (gr, tr)) in g
                    .data_mut()
                    .chunks_mut(k)
                    .zip(target.data().chunks(k))
                    .enumerate()
                {
                    let d = dy.data()[r];
                    for (gv, &t) in gr.iter_mut().zip(tr) {
                        let pv = *gv;
                        *gv = if pv < *eps || pv > 1.0 - eps {
                            0.0
                        } else {
                            d * (-t / pv + (1.0 - t) / (1.0 - pv))
                        };
                    }
                }
                acc(*pred, g, grads);
            }
            Op::SoftCe { pred, target, eps } => {
                let p = self.value(*pred);
                let k = p.row_len();
                let mut g = p.clone();
                for (r, (gr, tr)) in g
                    .data_mut()
                    .chunks_mut(k)
                    .zip(target.data().chunks(k))
                    .enumerate()
                {
                    let d = dy.data()[r];
                    for (gv, &t) in gr.iter_mut().zip(tr) {
                        let pv = *gv;
                        *gv = if pv < *eps || pv > 1.0 - eps {
                            0.0
                        } else {
                            -d * t / pv
                        };
                    }
                }
                acc(*pred, g, grads);
            }
            Op::Mean(x) => {
                let s = self.value(*x).shape();
                let n = self.value(*x).numel() as f64;
                acc(*x, Tensor::full(s, dy.item() / n), grads);
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape();
                acc(*x, Tensor::full(s, dy.item()), grads);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be NHWC");
    assert_eq!(ws[2], xs[3], "conv2d channel mismatch");
    let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, co) = (ws[0], ws[3]);
    let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
    let wdata = w.data();
    let bdata = b.data();
    let mut out = vec![0.0; n * ho * wo * co];
    out.par_chunks_mut(ho * wo * co)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = x.row(i);
            for oy in 0..ho {
                for ox in 0..wo {
                    let acc = &mut o[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    acc.copy_from_slice(bdata);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let px = &xi[(iy as usize * wd + ix as usize) * ci..][..ci];
                            let wk = &wdata[(ky * k + kx) * ci * co..][..ci * co];
                            for (c, &xv) in px.iter().enumerate() {
                                let wr = &wk[c * co..(c + 1) * co];
                                for (a, &wv) in acc.iter_mut().zip(wr) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    Tensor::new(vec![n, ho, wo, co], out).unwrap()
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> ConvGrads {
    let xs = x.shape();
    let ws = w.shape();
    let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, co) = (ws[0], ws[3]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
    let wdata = w.data();

    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let dyi = dy.row(i);
            let mut dx = if want_dx { vec![0.0; h * wd * ci] } else { Vec::new() };
            let mut dw = if want_dw { vec![0.0; k * k * ci * co] } else { Vec::new() };
            let mut db = if want_dw { vec![0.0; co] } else { Vec::new() };
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = &dyi[(oy * wo + ox) * co..][..co];
                    if want_dw {
                        for (d, gv) in db.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let base = (iy as usize * wd + ix as usize) * ci;
                            let woff = (ky * k + kx) * ci * co;
                            for c in 0..ci {
                                let wr = &wdata[woff + c * co..][..co];
                                if want_dx {
                                    let s: f64 = wr.iter().zip(g).map(|(a, b)| a * b).sum();
                                    dx[base + c] += s;
                                }
                                if want_dw {
                                    let xv = xi[base + c];
                                    let dwr = &mut dw[woff + c * co..][..co];
                                    for (d, gv) in dwr.iter_mut().zip(g) {
                                        *d += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dx, dw, db)
        })
        .collect();

    let dx = want_dx.then(|| {
        let mut data = Vec::with_capacity(x.numel());
        for (d, _, _) in &per_sample {
            data.extend_from_slice(d);
        }
        Tensor::new(xs.to_vec(), data).unwrap()
    });
    let (dw, db) = if want_dw {
        let mut dw = vec![0.0; k * k * ci * co];
        let mut db = vec![0.0; co];
        for (_, pw, pb) in &per_sample {
            for (a, b) in dw.iter_mut().zip(pw) {
                *a += b;
            }
            for (a, b) in db.iter_mut().zip(pb) {
                *a += b;
            }
        }
        (
            Some(Tensor::new(ws.to_vec(), dw).unwrap()),
            Some(Tensor::new(vec![co], db).unwrap()),
        )
    } else {
        (None, None)
    };
    (dx, dw, db)
}

fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    assert_eq!(w.shape()[0], k, "linear: input width mismatch");
    let m = w.shape()[1];
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let mut row = b.data().to_vec();
        for (j, &xv) in x.row(i).iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&w.data()[j * m..(j + 1) * m]) {
                *o += xv * wv;
            }
        }
        out.extend(row);
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_dx: bool) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[1];
    let mut dw = vec![0.0; k * m];
    let mut db = vec![0.0; m];
    let mut dx = if want_dx { vec![0.0; n * k] } else { Vec::new() };
    for i in 0..n {
        let g = dy.row(i);
        for (d, gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for (j, &xv) in x.row(i).iter().enumerate() {
            let wr = &w.data()[j * m..(j + 1) * m];
            if want_dx {
                dx[i * k + j] = wr.iter().zip(g).map(|(a, b)| a * b).sum();
            }
            for (d, gv) in dw[j * m..(j + 1) * m].iter_mut().zip(g) {
                *d += xv * gv;
            }
        }
    }
    (
        want_dx.then(|| Tensor::new(vec![n, k], dx).unwrap()),
        Tensor::new(vec![k, m], dw).unwrap(),
        Tensor::new(vec![m], db).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build(x))/dx against the tape gradient.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(shape));
        let h = 1e-6;
        let mut numeric = Tensor::zeros(shape);
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.variable(xp);
                let y = build(&mut g, x);
                g.value(y).item()
            };
            numeric.data_mut()[i] = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff = analytic.zip_map(&numeric, |a, b| a - b).norm();
        let scale = analytic.norm().max(numeric.norm()).max(1e-8);
        assert!(diff / scale < 1e-6, "rel err {} ", diff / scale);
    }

    fn weights(g: &mut Graph, seed: u64, shape: &[usize]) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rand_tensor(&mut rng, shape);
        g.constant(t)
    }

    #[test]
    fn conv_input_grad() {
        check(&[2, 5, 5, 3], 1, |g, x| {
            let w = weights(g, 9, &[3, 3, 3, 4]);
            let b = weights(g, 10, &[4]);
            let y = g.conv2d(x, w, b, 2, 1);
            let y = g.silu(y);
            g.sum(y)
        });
    }

    #[test]
    fn conv_weight_grad() {
        check(&[3, 3, 2, 4], 2, |g, w| {
            let x = weights(g, 11, &[2, 6, 6, 2]);
            let b = weights(g, 12, &[4]);
            let y = g.conv2d(x, w, b, 1, 1);
            let y = g.sigmoid(y);
            g.mean(y)
        });
    }

    #[test]
    fn linear_softmax_ce_grad() {
        check(&[3, 5], 3, |g, x| {
            let w = weights(g, 13, &[5, 4]);
            let b = weights(g, 14, &[4]);
            let y = g.linear(x, w, b);
            let p = g.softmax(y);
            let t = Tensor::new(vec![3, 4], vec![0.2, 0.8, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25]).unwrap();
            let l = g.soft_ce_rows(p, &t, 1e-7);
            g.mean(l)
        });
    }

    #[test]
    fn pool_broadcast_concat_slice_grad() {
        check(&[2, 3, 3, 2], 4, |g, x| {
            let p = g.global_avg_pool(x);
            let s = g.slice_last(p, 1, 1);
            let c = g.concat_last(&[p, s]);
            let b = g.broadcast_spatial(c, 3, 3);
            let sq = g.mul(b, b);
            let x2 = g.concat_last(&[x, x]);
            let x2 = g.slice_last(x2, 0, 3);
            let m = g.mul(sq, x2);
            g.sum(m)
        });
    }

    #[test]
    fn rows_norm_bce_grad() {
        check(&[4, 3], 5, |g, x| {
            let s = g.sigmoid(x);
            let gathered = g.gather_rows(s, &[0, 2, 2, 3]);
            let scaled = g.row_scale(gathered, &[0.3, 0.7, 1.0, 0.0]);
            let both = g.concat_rows(&[s, scaled]);
            let t = Tensor::full(&[8, 3], 0.4);
            let l = g.bce_rows(both, &t, 1e-7);
            let n = g.row_l2_norm(x);
            let a = g.mean(l);
            let b = g.mean(n);
            let b = g.scale(b, 0.5);
            let d = g.sub(a, b);
            g.add(d, a)
        });
    }

    #[test]
    fn standardize_grad() {
        check(&[3, 2, 2, 3], 6, |g, x| {
            let y = g.row_standardize(x, 1e-5);
            let w = weights(g, 15, &[3, 2, 2, 3]);
            let m = g.mul(y, w);
            g.sum(m)
        });
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 8.0]).unwrap());
        let y = g.row_standardize(x, 0.0);
        for row in g.value(y).data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        // d/dx (x * stop(x)) = stop(x)
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
        assert!(grads.get(d).is_none());
    }
}
