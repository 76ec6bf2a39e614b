//! Wengert tape: every op appends a node holding its value and the inputs it
//! needs for the vector-Jacobian product. Nodes are appended in evaluation
//! order, so walking the vector backwards from the loss is a reverse
//! topological traversal that touches each node once.

use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, for_each_broadcast};
use super::{numel, Result, Tensor, TensorError};

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    MatMul {
        a: usize,
        b: usize,
        batched: bool,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Unfold {
        x: usize,
        patch: usize,
        stride: usize,
    },
    Gather(usize, Arc<Vec<usize>>),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        // Nodes that no gradient can reach keep no backward record.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push_arc(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            backprop(&nodes, node, &g, &mut grads);
        }
        drop(nodes);
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_grads {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
            if let Some(ga) = slot(grads, nodes, *a) {
                if sa == out.shape() {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                } else {
                    for_each_broadcast(out.shape(), &sa, &sb, |i, ia, _| ga[ia] += g[i]);
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                if sb == out.shape() {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                } else {
                    for_each_broadcast(out.shape(), &sa, &sb, |i, _, ib| gb[ib] += sign * g[i]);
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).clone(), val(*b).clone());
            let (da, db) = (va.data(), vb.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                for_each_broadcast(out.shape(), va.shape(), vb.shape(), |i, ia, ib| {
                    ga[ia] += g[i] * db[ib]
                });
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for_each_broadcast(out.shape(), va.shape(), vb.shape(), |i, ia, ib| {
                    gb[ib] += g[i] * da[ia]
                });
            }
        }
        Op::Affine(x, scale) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
        Op::MatMul { a, b, batched } => {
            let (va, vb) = (val(*a).clone(), val(*b).clone());
            let sa = va.shape();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = vb.shape()[vb.rank() - 1];
            let batch = va.numel() / (m * k);
            if *batched {
                if let Some(ga) = slot(grads, nodes, *a) {
                    crate::exec::for_each_chunk_mut(ga, m * k, batch * m * k * n, |bi, chunk| {
                        kernels::gemm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &vb.data()[bi * k * n..(bi + 1) * k * n],
                            chunk,
                            m,
                            k,
                            n,
                        )
                    });
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    crate::exec::for_each_chunk_mut(gb, k * n, batch * m * k * n, |bi, chunk| {
                        kernels::gemm_tn(
                            &va.data()[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            chunk,
                            m,
                            k,
                            n,
                        )
                    });
                }
            } else {
                let rows = batch * m;
                if let Some(ga) = slot(grads, nodes, *a) {
                    kernels::gemm_nt(g, vb.data(), ga, rows, k, n);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    kernels::gemm_tn(va.data(), g, gb, rows, k, n);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let w = *out.shape().last().unwrap_or(&1);
                for ((yr, gr), dr) in out.data().chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (gg - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let w = *out.shape().last().unwrap_or(&1);
                for ((yr, gr), dr) in out.data().chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let total: f64 = gr.iter().sum();
                    for ((d, y), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += gg - y.exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let vg = val(*gamma).clone();
            let w = vg.numel();
            if let Some(gx) = slot(grads, nodes, *x) {
                let gam = vg.data();
                let mut dxhat = vec![0.0; w];
                for (r, ((gr, xr), dr)) in g
                    .chunks(w)
                    .zip(xhat.chunks(w))
                    .zip(gx.chunks_mut(w))
                    .enumerate()
                {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..w {
                        dxhat[j] = gr[j] * gam[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xr[j];
                    }
                    let inv = 1.0 / w as f64;
                    for j in 0..w {
                        dr[j] += rstd[r] * (dxhat[j] - inv * s1 - xr[j] * inv * s2);
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (gr, xr) in g.chunks(w).zip(xhat.chunks(w)) {
                    for j in 0..w {
                        gg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for gr in g.chunks(w) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Relu(x) => {
            let vx = val(*x).clone();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &xv), gg) in gx.iter_mut().zip(vx.data()).zip(g) {
                    if xv > 0.0 {
                        *d += gg;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let vx = val(*x).clone();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &xv), gg) in gx.iter_mut().zip(vx.data()).zip(g) {
                    *d += gg * gelu_grad(xv);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &y), gg) in gx.iter_mut().zip(out.data()).zip(g) {
                    *d += gg * y * (1.0 - y);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &y), gg) in gx.iter_mut().zip(out.data()).zip(g) {
                    *d += gg * y;
                }
            }
        }
        Op::Log(x) => {
            let vx = val(*x).clone();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &xv), gg) in gx.iter_mut().zip(vx.data()).zip(g) {
                    *d += gg / xv;
                }
            }
        }
        Op::Powf(x, p) => {
            let vx = val(*x).clone();
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, &xv), gg) in gx.iter_mut().zip(vx.data()).zip(g) {
                    *d += gg * p * xv.powf(p - 1.0);
                }
            }
        }
        Op::Permute(x, axes) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let (back, _) = kernels::permute(g, out.shape(), &kernels::inverse_axes(axes));
                gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Unfold { x, patch, stride } => {
            let sx = val(*x).shape().to_vec();
            if let Some(gx) = slot(grads, nodes, *x) {
                let (s, t, f) = (sx[0], sx[1], sx[2]);
                let tp = out.shape()[1];
                for si in 0..s {
                    for w in 0..tp {
                        for j in 0..*patch {
                            let src = (si * t + w * stride + j) * f;
                            let dst = ((si * tp + w) * patch + j) * f;
                            for c in 0..f {
                                gx[src + c] += g[dst + c];
                            }
                        }
                    }
                }
            }
        }
        Op::Gather(x, idx) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (gg, &i) in g.iter().zip(idx.iter()) {
                    gx[i] += gg;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let n = gx.len() as f64;
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
        Op::SumAxis(x, axis) => {
            let sx = val(*x).shape().to_vec();
            if let Some(gx) = slot(grads, nodes, *x) {
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let inner: usize = sx[axis + 1..].iter().product();
                for o in 0..outer {
                    for l in 0..len {
                        let src = &g[o * inner..(o + 1) * inner];
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn unary(&self, op: Op, value: Tensor) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (a, b) = (self.value(), other.value());
        let out_shape = kernels::broadcast_shape(name, a.shape(), b.shape())?;
        let data = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let mut d = vec![0.0; numel(&out_shape)];
            let (da, db) = (a.data(), b.data());
            for_each_broadcast(&out_shape, a.shape(), b.shape(), |i, ia, ib| {
                d[i] = f(da[ia], db[ib])
            });
            d
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok((Tensor::new(out_shape, data)?, rg))
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (v, rg) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), rg))
    }

    /// `self * scale + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        let v = map_unary(&self.value(), |x| x * scale + shift);
        self.unary(Op::Affine(self.id, scale), v)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    /// `[..., m, k] × [k, n]` (shared right operand) or
    /// `[..., m, k] × [..., k, n]` (matching batch axes).
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batched = sb.len() > 2;
        if batched && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut c = vec![0.0; batch * m * n];
        if batched {
            crate::exec::for_each_chunk_mut(&mut c, m * n, batch * m * k * n, |bi, chunk| {
                kernels::gemm(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    chunk,
                    m,
                    k,
                    n,
                )
            });
        } else {
            kernels::gemm(a.data(), b.data(), &mut c, batch * m, k, n);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new(out_shape, c)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                batched,
            },
            rg,
        ))
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().unwrap_or(&1);
        let y = kernels::softmax_rows(x.data(), w)?;
        Ok(self.unary(Op::Softmax(self.id), Tensor::new(x.shape().to_vec(), y)?))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().unwrap_or(&1);
        let mut out = vec![0.0; x.numel()];
        for (r, (xr, or)) in x.data().chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let max = xr
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: r });
            }
            let lse = max + xr.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in or.iter_mut().zip(xr) {
                *o = v - lse;
            }
        }
        Ok(self.unary(
            Op::LogSoftmax(self.id),
            Tensor::new(x.shape().to_vec(), out)?,
        ))
    }

    /// Normalizes each last-axis slice to zero mean and unit (population)
    /// variance, then applies `gamma * x + beta`.
    pub fn layernorm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let w = *x.shape().last().unwrap_or(&1);
        if g.shape() != [w] || b.shape() != [w] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let rows = x.numel() / w.max(1);
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let xr = &x.data()[r * w..(r + 1) * w];
            let mean = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..w {
                let h = (xr[j] - mean) * rs;
                xhat[r * w + j] = h;
                out[r * w + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.tape.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = map_unary(&self.value(), |x| x.max(0.0));
        self.unary(Op::Relu(self.id), v)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        let v = map_unary(&self.value(), gelu);
        self.unary(Op::Gelu(self.id), v)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = map_unary(&self.value(), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(Op::Sigmoid(self.id), v)
    }

    pub fn exp(&self) -> Var<'t> {
        let v = map_unary(&self.value(), f64::exp);
        self.unary(Op::Exp(self.id), v)
    }

    pub fn log(&self) -> Var<'t> {
        let v = map_unary(&self.value(), f64::ln);
        self.unary(Op::Log(self.id), v)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        let v = map_unary(&self.value(), |x| x.powf(p));
        self.unary(Op::Powf(self.id, p), v)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(TensorError::Invalid(format!(
                "permute: {:?} is not a permutation of rank {}",
                axes,
                x.rank()
            )));
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), axes);
        Ok(self.unary(
            Op::Permute(self.id, axes.to_vec()),
            Tensor::new(shape, data)?,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::Invalid("transpose needs rank >= 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != x.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: x.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(self.unary(
            Op::Reshape(self.id),
            Tensor::new(shape.to_vec(), x.data().to_vec())?,
        ))
    }

    /// Sliding windows over axis 1 of an `[S, T, F]` tensor:
    /// window `w` concatenates steps `w*stride .. w*stride+patch`, giving
    /// `[S, (T-patch)/stride + 1, patch*F]`.
    pub fn unfold(&self, patch: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let sh = x.shape();
        if sh.len() != 3 || patch == 0 || stride == 0 || patch > sh[1] {
            return Err(TensorError::Invalid(format!(
                "unfold: patch {patch} stride {stride} on shape {sh:?}"
            )));
        }
        let (s, t, f) = (sh[0], sh[1], sh[2]);
        let tp = (t - patch) / stride + 1;
        let mut out = Vec::with_capacity(s * tp * patch * f);
        for si in 0..s {
            for w in 0..tp {
                let start = (si * t + w * stride) * f;
                out.extend_from_slice(&x.data()[start..start + patch * f]);
            }
        }
        Ok(self.unary(
            Op::Unfold {
                x: self.id,
                patch,
                stride,
            },
            Tensor::new(vec![s, tp, patch * f], out)?,
        ))
    }

    /// `out.flat[i] = self.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != index.len() {
            return Err(TensorError::Invalid(
                "gather: index count does not match shape".into(),
            ));
        }
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            let v = *x.data().get(i).ok_or_else(|| {
                TensorError::Invalid(format!("gather: index {i} out of range {}", x.numel()))
            })?;
            out.push(v);
        }
        Ok(self.unary(
            Op::Gather(self.id, index),
            Tensor::new(shape.to_vec(), out)?,
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.unary(Op::Mean(self.id), Tensor::scalar(s))
    }

    /// Sums out one axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let sh = x.shape();
        if axis >= sh.len() {
            return Err(TensorError::Invalid(format!(
                "sum_axis: axis {axis} on {sh:?}"
            )));
        }
        let outer: usize = sh[..axis].iter().product();
        let len = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = sh.to_vec();
        shape.remove(axis);
        Ok(self.unary(Op::SumAxis(self.id, axis), Tensor::new(shape, out)?))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_product() {
        let tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(i.matmul(b).unwrap().value().data(), &[3., 4., 5., 6.]);
        let a = tape.param(t(&[1, 2], &[1., 2.]));
        let c = tape.constant(t(&[2, 1], &[3., 4.]));
        let y = a.matmul(c).unwrap();
        assert_eq!(y.value().data(), &[11.0]);
        y.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape
            .constant(Tensor::from_vec(vec![0.0, 0.0]))
            .softmax()
            .unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
        let s = tape
            .constant(Tensor::from_vec(vec![1.0, 0.0]))
            .softmax()
            .unwrap();
        assert!((s.value().data()[0] - 0.7311).abs() < 1e-4);
        assert!((s.value().data()[1] - 0.2689).abs() < 1e-4);
        let s = tape
            .constant(Tensor::from_vec(vec![5.0, f64::NEG_INFINITY, 5.0]))
            .softmax()
            .unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.0, 0.5]);
        let err = tape
            .constant(Tensor::from_vec(vec![f64::NEG_INFINITY; 2]))
            .softmax()
            .unwrap_err();
        assert!(matches!(err, TensorError::DegenerateRow { row: 0 }));
    }

    #[test]
    fn layernorm_examples() {
        let tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape
            .constant(Tensor::full(&[3], 1.0))
            .layernorm(g, b, 1e-5)
            .unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape
            .constant(Tensor::from_vec(vec![0.0, 2.0]))
            .layernorm(g, b, 1e-5)
            .unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-3);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let tape = Tape::new();
        let p = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        p.sum().backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[1.0, 1.0]);
        tape.zero_grad();
        let l = p.mul(p).unwrap().sum();
        l.backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[2.0, 4.0]);
        l.backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[4.0, 8.0]);
        assert!(matches!(p.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_record_no_graph() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let y = c.exp().sum();
        assert!(!y.requires_grad());
        y.backward().unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn unfold_window_count() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 20, 8]));
        assert_eq!(x.unfold(2, 1).unwrap().shape(), vec![1, 19, 16]);
        assert_eq!(x.unfold(20, 3).unwrap().shape(), vec![1, 1, 160]);
        assert!(x.unfold(21, 1).is_err());
    }
}
