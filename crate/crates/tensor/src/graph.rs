//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! the trainable leaves. Nodes that do not depend on a trainable leaf are
//! skipped during the backward walk.

use std::cell::RefCell;
use std::rc::Rc;

use crate::counter::{record, MacKind};
use crate::error::{config_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, CubicTaps, MatRef};
use crate::tensor::Tensor;

/// A differentiable op defined outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient w.r.t. each input, `None` where the input is not differentiable.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddTiled(usize, usize),
    AddMid { x: usize, p: usize, mid: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul(usize, usize),
    Gelu(usize),
    Softplus(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, moments: Vec<(f64, f64)> },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    Conv3d { x: usize, k: usize, b: Option<usize>, geom: ConvGeom },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<f64> },
    Reshape(usize),
    Permute { x: usize, axes: Vec<usize> },
    MeanAxis { x: usize, axis: usize },
    Sum(usize),
    Bicubic { x: usize, ty: Vec<CubicTaps>, tx: Vec<CubicTaps> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_unchecked(t, Op::Leaf, false)
    }

    /// A trainable leaf; gradients flow back to it.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push_unchecked(t, Op::Leaf, true)
    }

    fn push_unchecked(&self, t: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, t: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push_unchecked(t, op, needs_grad))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Records a custom differentiable op whose forward value was computed by the caller.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g>], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var<'g>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let name = op.name();
        self.push(name, output, Op::Custom { inputs: ids.clone(), op }, &ids)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(shape_err("backward", out.value.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(out.value.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            for (input, dg) in backward_node(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dg),
                    slot => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let wants = |i: usize| nodes[i].needs_grad;
    let like = |i: usize, data: Vec<f64>| Tensor::from_parts(val(i).shape().to_vec(), data);
    let gd = g.data();
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                out.push((*a, like(*a, gd.iter().zip(bv).map(|(g, b)| g * b).collect())));
            }
            if wants(*b) {
                out.push((*b, like(*b, gd.iter().zip(av).map(|(g, a)| g * a).collect())));
            }
        }
        Op::Scale(a, s) => out.push((*a, g.map(|v| v * s))),
        Op::AddTiled(x, p) => {
            out.push((*x, g.clone()));
            if wants(*p) {
                let n = val(*p).numel();
                let mut dp = vec![0.0; n];
                for chunk in gd.chunks_exact(n) {
                    for (d, c) in dp.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                out.push((*p, like(*p, dp)));
            }
        }
        Op::AddMid { x, p, mid } => {
            out.push((*x, g.clone()));
            if wants(*p) {
                let pv = val(*p);
                let c = pv.last_dim();
                let mut dp = vec![0.0; pv.numel()];
                for (r, chunk) in gd.chunks_exact(mid * c).enumerate() {
                    for row in chunk.chunks_exact(c) {
                        for (d, v) in dp[r * c..(r + 1) * c].iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                out.push((*p, like(*p, dp)));
            }
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / k;
            let dy = MatRef::rows(gd, rows, n);
            if wants(*x) {
                let dx = kernels::matmul(dy, MatRef::rows(wv.data(), k, n).t());
                out.push((*x, like(*x, dx)));
            }
            if wants(*w) {
                let dw = kernels::matmul(MatRef::rows(xv.data(), rows, k).t(), dy);
                out.push((*w, like(*w, dw)));
            }
            if let Some(b) = b {
                if wants(*b) {
                    out.push((*b, like(*b, col_sums(gd, n))));
                }
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let dy = MatRef::rows(gd, m, n);
            if wants(*a) {
                out.push((*a, like(*a, kernels::matmul(dy, MatRef::rows(bv.data(), k, n).t()))));
            }
            if wants(*b) {
                out.push((*b, like(*b, kernels::matmul(MatRef::rows(av.data(), m, k).t(), dy))));
            }
        }
        Op::Gelu(x) => {
            let d = val(*x).data().iter().zip(gd).map(|(&x, g)| g * kernels::gelu_grad(x)).collect();
            out.push((*x, like(*x, d)));
        }
        Op::Softplus(x) => {
            let d = val(*x).data().iter().zip(gd).map(|(&x, g)| g * kernels::sigmoid(x)).collect();
            out.push((*x, like(*x, d)));
        }
        Op::Softmax(x) => {
            let mut d = gd.to_vec();
            kernels::softmax_rows_backward(node.value.data(), &mut d, node.value.last_dim());
            out.push((*x, like(*x, d)));
        }
        Op::LayerNorm { x, gamma, beta, moments } => {
            let xv = val(*x);
            let gv = val(*gamma).data();
            let c = gv.len();
            let mut dx = vec![0.0; xv.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for (r, (&(mean, rstd), (xrow, grow))) in moments
                .iter()
                .zip(xv.data().chunks_exact(c).zip(gd.chunks_exact(c)))
                .enumerate()
            {
                for j in 0..c {
                    xhat[j] = (xrow[j] - mean) * rstd;
                    dxhat[j] = grow[j] * gv[j];
                    dgamma[j] += grow[j] * xhat[j];
                    dbeta[j] += grow[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / c as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[r * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            out.push((*x, like(*x, dx)));
            out.push((*gamma, like(*gamma, dgamma)));
            out.push((*beta, like(*beta, dbeta)));
        }
        Op::ChannelAffine { x, scale, shift } => {
            let sv = val(*scale).data();
            let c = sv.len();
            if wants(*x) {
                let d = gd.iter().enumerate().map(|(i, g)| g * sv[i % c]).collect();
                out.push((*x, like(*x, d)));
            }
            if wants(*scale) {
                let mut ds = vec![0.0; c];
                for (i, (g, xv)) in gd.iter().zip(val(*x).data()).enumerate() {
                    ds[i % c] += g * xv;
                }
                out.push((*scale, like(*scale, ds)));
            }
            out.push((*shift, like(*shift, col_sums(gd, c))));
        }
        Op::Conv3d { x, k, b, geom } => {
            let (dx, dk, db) = kernels::conv3d_backward(val(*x).data(), val(*k).data(), gd, geom);
            out.push((*x, like(*x, dx)));
            out.push((*k, like(*k, dk)));
            if let Some(b) = b {
                out.push((*b, like(*b, db)));
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let s = val(*q).shape();
            let (dq, dk, dv) = kernels::attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                gd,
                s[0],
                s[1],
                s[2],
                *heads,
            );
            out.push((*q, like(*q, dq)));
            out.push((*k, like(*k, dk)));
            out.push((*v, like(*v, dv)));
        }
        Op::Reshape(x) => out.push((*x, like(*x, gd.to_vec()))),
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            out.push((*x, permute_tensor(g, &inverse)));
        }
        Op::MeanAxis { x, axis } => {
            let s = val(*x).shape();
            let (outer, n, inner) = split_axis(s, *axis);
            let mut d = vec![0.0; outer * n * inner];
            let inv = 1.0 / n as f64;
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        d[(o * n + j) * inner + i] = gd[o * inner + i] * inv;
                    }
                }
            }
            out.push((*x, like(*x, d)));
        }
        Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), gd[0]))),
        Op::Bicubic { x, ty, tx } => {
            let s = val(*x).shape();
            let (w, c) = (s[1], s[2]);
            let ow = tx.len();
            let mut d = vec![0.0; val(*x).numel()];
            for (oy, ty) in ty.iter().enumerate() {
                for (ox, txx) in tx.iter().enumerate() {
                    let grow = &gd[(oy * ow + ox) * c..][..c];
                    for (&iy, &wy) in ty.idx.iter().zip(&ty.w) {
                        for (&ix, &wx) in txx.idx.iter().zip(&txx.w) {
                            let wgt = wy * wx;
                            let dst = &mut d[(iy * w + ix) * c..][..c];
                            for (a, b) in dst.iter_mut().zip(grow) {
                                *a += wgt * b;
                            }
                        }
                    }
                }
            }
            out.push((*x, like(*x, d)));
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let grads = op.backward(&ins, &node.value, g);
            if grads.len() != inputs.len() {
                return Err(config_err(op.name(), "backward returned wrong number of gradients"));
            }
            for (&i, dg) in inputs.iter().zip(grads) {
                if let Some(dg) = dg {
                    if dg.shape() != val(i).shape() {
                        return Err(shape_err(op.name(), val(i).shape(), dg.shape()));
                    }
                    out.push((i, dg));
                }
            }
        }
    }
    Ok(out)
}

fn col_sums(data: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for row in data.chunks_exact(n) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let s = t.shape();
    let rank = s.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = t.data();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        data.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
    }

    fn elementwise(
        &self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(name, Tensor::from_parts(a.shape().to_vec(), data), op, &[self.id, other.id])
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'g>> {
        let t = self.value().map(|v| v * s);
        self.graph.push("scale", t, Op::Scale(self.id, s), &[self.id])
    }

    /// `x + p` where `p` repeats over the leading part of `x`
    /// (`x.numel()` must be a multiple of `p.numel()` and `x` ends with `p`'s shape).
    pub fn add_tiled(&self, p: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&p);
        let (xv, pv) = (self.value(), p.value());
        let (xs, ps) = (xv.shape(), pv.shape());
        if ps.len() > xs.len() || xs[xs.len() - ps.len()..] != *ps {
            return Err(shape_err("add_tiled", xs, ps));
        }
        let n = pv.numel();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (a, b) in chunk.iter_mut().zip(pv.data()) {
                *a += b;
            }
        }
        self.graph.push(
            "add_tiled",
            Tensor::from_parts(xs.to_vec(), data),
            Op::AddTiled(self.id, p.id),
            &[self.id, p.id],
        )
    }

    /// `x[a, …, c] + p[a, c]`: `p` of shape `[A, C]` broadcast over every
    /// middle axis of `x` (`x.shape[0] == A`, `x.shape[last] == C`).
    pub fn add_mid_broadcast(&self, p: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&p);
        let (xv, pv) = (self.value(), p.value());
        let (xs, ps) = (xv.shape(), pv.shape());
        if ps.len() != 2 || xs.len() < 2 || xs[0] != ps[0] || xs[xs.len() - 1] != ps[1] {
            return Err(shape_err("add_mid_broadcast", xs, ps));
        }
        let c = ps[1];
        let mid = xv.numel() / (ps[0] * c);
        let mut data = xv.data().to_vec();
        for (r, chunk) in data.chunks_exact_mut(mid * c).enumerate() {
            let prow = &pv.data()[r * c..(r + 1) * c];
            for row in chunk.chunks_exact_mut(c) {
                for (a, b) in row.iter_mut().zip(prow) {
                    *a += b;
                }
            }
        }
        self.graph.push(
            "add_mid_broadcast",
            Tensor::from_parts(xs.to_vec(), data),
            Op::AddMid { x: self.id, p: p.id, mid },
            &[self.id, p.id],
        )
    }

    /// Affine map over the last axis: `x · w (+ b)` with `w: [K, N]`.
    pub fn linear(&self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(&w);
        let (xv, wv) = (self.value(), w.value());
        let ws = wv.shape();
        if ws.len() != 2 || xv.last_dim() != ws[0] {
            return Err(shape_err("linear", xv.shape(), ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = xv.numel() / k;
        let mut data = vec![0.0; rows * n];
        if let Some(b) = b {
            let bv = b.value();
            if bv.shape() != [n] {
                return Err(shape_err("linear bias", ws, bv.shape()));
            }
            for row in data.chunks_exact_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm_into(
            MatRef::rows(xv.data(), rows, k),
            MatRef::rows(wv.data(), k, n),
            1.0,
            &mut data,
            n,
        );
        record(MacKind::Linear, (rows * k * n) as u64);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut inputs = vec![self.id, w.id];
        inputs.extend(b.map(|b| b.id));
        self.graph.push(
            "linear",
            Tensor::from_parts(shape, data),
            Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id) },
            &inputs,
        )
    }

    pub fn matmul(&self, b: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&b);
        let (av, bv) = (self.value(), b.value());
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(shape_err("matmul", as_, bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let data = kernels::matmul(MatRef::rows(av.data(), m, k), MatRef::rows(bv.data(), k, n));
        record(MacKind::Linear, (m * k * n) as u64);
        self.graph.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, b.id),
            &[self.id, b.id],
        )
    }

    pub fn gelu(&self) -> Result<Var<'g>> {
        let t = self.value().map(kernels::gelu);
        self.graph.push("gelu", t, Op::Gelu(self.id), &[self.id])
    }

    pub fn softplus(&self) -> Result<Var<'g>> {
        let t = self.value().map(kernels::softplus);
        self.graph.push("softplus", t, Op::Softplus(self.id), &[self.id])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'g>> {
        let v = self.value();
        let mut data = v.data().to_vec();
        kernels::softmax_rows(&mut data, v.last_dim());
        self.graph.push(
            "softmax",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::Softmax(self.id),
            &[self.id],
        )
    }

    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let c = xv.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        let moments = kernels::row_moments(xv.data(), c, eps);
        let mut data = Vec::with_capacity(xv.numel());
        for (row, &(mean, rstd)) in xv.data().chunks_exact(c).zip(&moments) {
            for j in 0..c {
                data.push((row[j] - mean) * rstd * gv.data()[j] + bv.data()[j]);
            }
        }
        self.graph.push(
            "layer_norm",
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, moments },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Per-channel `x · scale + shift` over the last axis.
    pub fn channel_affine(&self, scale: Var<'g>, shift: Var<'g>) -> Result<Var<'g>> {
        let (xv, sv, tv) = (self.value(), scale.value(), shift.value());
        let c = xv.last_dim();
        if sv.shape() != [c] || tv.shape() != [c] {
            return Err(shape_err("channel_affine", xv.shape(), sv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i % c] + tv.data()[i % c])
            .collect();
        self.graph.push(
            "channel_affine",
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::ChannelAffine { x: self.id, scale: scale.id, shift: shift.id },
            &[self.id, scale.id, shift.id],
        )
    }

    /// Channels-last 3D convolution of `[T, H, W, Cin]` with `[kt, kh, kw, Cin, Cout]`.
    pub fn conv3d(
        &self,
        kernel: Var<'g>,
        bias: Option<Var<'g>>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var<'g>> {
        let (xv, kv) = (self.value(), kernel.value());
        let geom = conv_geometry(xv.shape(), kv.shape(), stride, padding)?;
        let bv = bias.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [geom.cout] {
                return Err(shape_err("conv3d bias", kv.shape(), bv.shape()));
            }
        }
        let data = kernels::conv3d_forward(xv.data(), kv.data(), bv.as_deref().map(Tensor::data), &geom);
        record(MacKind::Conv, (geom.out_positions() * geom.taps() * geom.cin * geom.cout) as u64);
        let [ot, oh, ow] = geom.output;
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        self.graph.push(
            "conv3d",
            Tensor::from_parts(vec![ot, oh, ow, geom.cout], data),
            Op::Conv3d { x: self.id, k: kernel.id, b: bias.map(|b| b.id), geom },
            &inputs,
        )
    }

    /// Multi-head scaled dot-product attention over `[batch, len, dim]`
    /// queries/keys/values, one independent sequence per batch row.
    pub fn attention(&self, k: Var<'g>, v: Var<'g>, heads: usize) -> Result<Var<'g>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let s = qv.shape();
        if s.len() != 3 || kv.shape() != s || vv.shape() != s {
            return Err(shape_err("attention", s, kv.shape()));
        }
        if heads == 0 || s[2] % heads != 0 {
            return Err(config_err("attention", format!("dim {} not divisible by {heads} heads", s[2])));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let (out, probs) = kernels::attention_forward(qv.data(), kv.data(), vv.data(), b, n, c, heads);
        record(MacKind::AttnScore, (b * n * n * c) as u64);
        record(MacKind::AttnValue, (b * n * n * c) as u64);
        self.graph.push(
            "attention",
            Tensor::from_parts(s.to_vec(), out),
            Op::Attention { q: self.id, k: k.id, v: v.id, heads, probs },
            &[self.id, k.id, v.id],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        self.graph.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..v.rank()).collect::<Vec<_>>() {
            return Err(config_err("permute", format!("{axes:?} is not a permutation of rank {}", v.rank())));
        }
        let t = permute_tensor(&v, axes);
        self.graph.push("permute", t, Op::Permute { x: self.id, axes: axes.to_vec() }, &[self.id])
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(config_err("mean_axis", format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, n, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let src = v.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..][..inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        data.iter_mut().for_each(|d| *d *= inv);
        let mut shape: Vec<usize> = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.graph.push(
            "mean_axis",
            Tensor::from_parts(shape, data),
            Op::MeanAxis { x: self.id, axis },
            &[self.id],
        )
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let s = self.value().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Channel-wise separable bicubic resize of `[h, w, C]` to `[out_h, out_w, C]`.
    pub fn bicubic_resize_2d(&self, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let v = self.value();
        let (t, ty, tx) = bicubic_apply(&v, out_h, out_w)?;
        self.graph.push("bicubic_resize_2d", t, Op::Bicubic { x: self.id, ty, tx }, &[self.id])
    }
}

pub(crate) fn conv_geometry(
    xs: &[usize],
    ks: &[usize],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<ConvGeom> {
    if xs.len() != 4 || ks.len() != 5 || xs[3] != ks[3] {
        return Err(shape_err("conv3d", xs, ks));
    }
    if stride.contains(&0) {
        return Err(config_err("conv3d", "stride must be positive"));
    }
    let mut output = [0; 3];
    for a in 0..3 {
        let span = xs[a] + 2 * padding[a];
        if span < ks[a] {
            return Err(config_err(
                "conv3d",
                format!("axis {a}: input {} with padding {} is smaller than kernel {}", xs[a], padding[a], ks[a]),
            ));
        }
        output[a] = (span - ks[a]) / stride[a] + 1;
    }
    Ok(ConvGeom {
        input: [xs[0], xs[1], xs[2]],
        kernel: [ks[0], ks[1], ks[2]],
        stride,
        padding,
        output,
        cin: ks[3],
        cout: ks[4],
    })
}

/// Padding that keeps spatial size at stride 1. Kernel sizes must be odd.
pub fn same_padding(kernel: [usize; 3]) -> Result<[usize; 3]> {
    if kernel.iter().any(|k| k % 2 == 0) {
        return Err(config_err("conv3d", format!("same padding needs odd kernel dims, got {kernel:?}")));
    }
    Ok(kernel.map(|k| k / 2))
}

fn bicubic_apply(v: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, Vec<CubicTaps>, Vec<CubicTaps>)> {
    let s = v.shape();
    if s.len() != 3 {
        return Err(shape_err("bicubic_resize_2d", s, &[0, 0, 0]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if h < 2 || w < 2 {
        return Err(config_err("bicubic_resize_2d", format!("input grid {h}x{w} must be at least 2x2")));
    }
    if out_h < 1 || out_w < 1 {
        return Err(config_err("bicubic_resize_2d", format!("output grid {out_h}x{out_w} is empty")));
    }
    let ty = kernels::cubic_taps(h, out_h);
    let tx = kernels::cubic_taps(w, out_w);
    if out_h == h && out_w == w {
        return Ok((v.clone(), ty, tx));
    }
    let src = v.data();
    // rows first: [h, w, c] -> [h, out_w, c]
    let mut mid = vec![0.0; h * out_w * c];
    for y in 0..h {
        for (ox, taps) in tx.iter().enumerate() {
            for ch in 0..c {
                mid[(y * out_w + ox) * c + ch] = kernels::cubic_combine(taps, |ix| src[(y * w + ix) * c + ch]);
            }
        }
    }
    let mut data = vec![0.0; out_h * out_w * c];
    for (oy, taps) in ty.iter().enumerate() {
        for ox in 0..out_w {
            for ch in 0..c {
                data[(oy * out_w + ox) * c + ch] = kernels::cubic_combine(taps, |iy| mid[(iy * out_w + ox) * c + ch]);
            }
        }
    }
    Ok((Tensor::from_parts(vec![out_h, out_w, c], data), ty, tx))
}

/// Non-differentiable bicubic resize for plain tensors (positional-embedding adaptation).
pub fn bicubic_resize_2d(pe: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    bicubic_apply(pe, out_h, out_w).map(|(t, _, _)| t)
}

/// Attention weights `softmax(q·kᵀ/√d)` per head for `[batch, len, dim]`
/// inputs, shaped `[batch, heads, len, len]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s {
        return Err(shape_err("attention_probs", s, k.shape()));
    }
    if heads == 0 || s[2] % heads != 0 {
        return Err(config_err("attention_probs", format!("dim {} not divisible by {heads} heads", s[2])));
    }
    let (_, probs) = kernels::attention_forward(q.data(), k.data(), k.data(), s[0], s[1], s[2], heads);
    Ok(Tensor::from_parts(vec![s[0], heads, s[1], s[1]], probs))
}
