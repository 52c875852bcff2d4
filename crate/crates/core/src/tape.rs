//! Record-on-execute gradient tape.
//!
//! Every operation evaluates eagerly and appends a node holding its output
//! value and enough saved state to run its backward rule. Nodes are appended
//! in execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] simply walks it in reverse.
//!
//! Leaves come in two flavours: [`Tape::leaf`] (trainable, receives a
//! gradient) and [`Tape::constant`] (detached, never receives one). A node
//! requires a gradient iff one of its inputs does.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch_a: usize, batch_b: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    AddTrailing { x: Var, y: Var },
    Gelu { x: Var },
    Relu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: Var },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Sum { x: Var },
    Mean { x: Var },
    SumLastDim { x: Var },
    Sqrt { x: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-owner record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact GELU, `x·Φ(x)`, on a plain value.
pub fn gelu(x: f64) -> f64 {
    gelu_scalar(x)
}

/// Splits a shape into (leading batch count, rows, cols).
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [.., m, n] => Some((shape[..shape.len() - 2].iter().product(), *m, *n)),
        _ => None,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a detached value; it never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::dim("matmul", sa, sb);
        let (batch_a, m, k) = matrix_dims(sa).ok_or_else(err)?;
        let (batch_b, k2, n) = matrix_dims(sb).ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let lead_out = if lead_a == lead_b || (batch_b == 1 && (batch_a > 1 || lead_a.len() >= lead_b.len())) {
            lead_a.to_vec()
        } else if batch_a == 1 {
            lead_b.to_vec()
        } else {
            return Err(err());
        };
        let batch = batch_a.max(batch_b);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        if batch_b == 1 {
            gemm::nn(batch_a * m, k, n, av, bv, &mut out);
        } else {
            for i in 0..batch {
                let ai = if batch_a == 1 { 0 } else { i };
                gemm::nn(
                    m,
                    k,
                    n,
                    &av[ai * m * k..(ai + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let mut shape = lead_out;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, batch_a, batch_b, m, k, n }, rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let (batch, m, n) = matrix_dims(s).ok_or_else(|| Error::dim("transpose", s, &[]))?;
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let src = &xv[b * m * n..(b + 1) * m * n];
            let dst = &mut out[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast2 { x }, rg))
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x, c }, rg)
    }

    /// Multiplies by a one-element tensor that may itself be differentiable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(t, Op::ScaleBy { x, s }, rg))
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s; `y` is repeated over
    /// the leading dimensions. Covers bias adds and batch expansion.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if !tx.shape().ends_with(ty.shape()) {
            return Err(Error::dim("add_trailing", tx.shape(), ty.shape()));
        }
        let inner = ty.numel().max(1);
        let yd = ty.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + yd[i % inner]).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, y]);
        Ok(self.push(t, Op::AddTrailing { x, y }, rg))
    }

    /// `x · w + b` with `w: [C_in, C_out]` and optional `b: [C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_trailing(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu { x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu { x }, rg)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::Contract("softmax over an empty last dimension".into()));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x }, rg))
    }

    /// Per-row standardization over the last dimension (population variance,
    /// ε = 1e-5 inside the root) followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *tx.shape().last().unwrap_or(&0);
        if tg.shape() != [c] || tb.shape() != [c] || c == 0 {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::dim("reshape", tx.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), tx.data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `[..., J, h·d] → [..., h, J, d]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let tx = self.value(x);
        let (batch, j, c) = matrix_dims(tx.shape()).ok_or_else(|| Error::dim("split_heads", tx.shape(), &[heads]))?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim("split_heads", tx.shape(), &[heads]));
        }
        let d = c / heads;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for r in 0..j {
                    let o = ((b * heads + h) * j + r) * d;
                    let s = (b * j + r) * c + h * d;
                    out[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
        let mut shape = tx.shape()[..tx.rank() - 2].to_vec();
        shape.extend([heads, j, d]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SplitHeads { x, heads }, rg))
    }

    /// `[..., h, J, d] → [..., J, h·d]`, the inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 3 {
            return Err(Error::dim("merge_heads", s, &[]));
        }
        let r = s.len();
        let (heads, j, d) = (s[r - 3], s[r - 2], s[r - 1]);
        let batch: usize = s[..r - 3].iter().product();
        let c = heads * d;
        let src = tx.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for h in 0..heads {
                for row in 0..j {
                    let i = ((b * heads + h) * j + row) * d;
                    let o = (b * j + row) * c + h * d;
                    out[o..o + d].copy_from_slice(&src[i..i + d]);
                }
            }
        }
        let mut shape = s[..r - 3].to_vec();
        shape.extend([j, c]);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MergeHeads { x, heads }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Sums over the last dimension, dropping it.
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::Contract("sum over an empty last dimension".into()));
        }
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SumLastDim { x }, rg))
    }

    /// Elementwise square root. The backward rule uses a zero subgradient
    /// where the output is exactly zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(v) = t.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Validation(format!("sqrt of negative value {v}")));
        }
        let out = t.map(f64::sqrt);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sqrt { x }, rg))
    }

    /// Back-propagates from a one-element `loss`, adding `∂loss/∂leaf` into
    /// each trainable leaf's gradient. Calling it again without
    /// [`Tape::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    /// Applies node `i`'s backward rule to its upstream gradient `g`.
    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch_a, batch_b, m, k, n } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let batch = batch_a.max(batch_b);
                if let Some(da) = grad_slot(nodes, grads, a) {
                    if batch_b == 1 {
                        gemm::nt(batch_a * m, n, k, g, bv, da);
                    } else {
                        for bi in 0..batch {
                            let ai = if batch_a == 1 { 0 } else { bi };
                            gemm::nt(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bv[bi * k * n..(bi + 1) * k * n],
                                &mut da[ai * m * k..(ai + 1) * m * k],
                            );
                        }
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    if batch_b == 1 {
                        gemm::tn(k, batch_a * m, n, av, g, db);
                    } else {
                        for bi in 0..batch {
                            let ai = if batch_a == 1 { 0 } else { bi };
                            gemm::tn(
                                k,
                                m,
                                n,
                                &av[ai * m * k..(ai + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            &Op::TransposeLast2 { x } => {
                let s = node.value.shape();
                let r = s.len();
                // output is [.., n, m]; input was [.., m, n]
                let (n, m) = (s[r - 2], s[r - 1]);
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (b, gb) in g.chunks(m * n).enumerate() {
                        let dst = &mut dx[b * m * n..(b + 1) * m * n];
                        for j in 0..n {
                            for i2 in 0..m {
                                dst[i2 * n + j] += gb[j * m + i2];
                            }
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(da) = grad_slot(nodes, grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    add_into(db, g);
                }
            }
            &Op::Sub { a, b } => {
                if let Some(da) = grad_slot(nodes, grads, a) {
                    add_into(da, g);
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = grad_slot(nodes, grads, a) {
                    for ((d, gv), bb) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bb;
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, b) {
                    for ((d, gv), aa) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * aa;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            &Op::ScaleBy { x, s } => {
                let c = nodes[s.0].value.data()[0];
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
                if let Some(ds) = grad_slot(nodes, grads, s) {
                    ds[0] += xv.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            &Op::AddTrailing { x, y } => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    add_into(dx, g);
                }
                if let Some(dy) = grad_slot(nodes, grads, y) {
                    let inner = dy.len().max(1);
                    for chunk in g.chunks(inner) {
                        add_into(dy, chunk);
                    }
                }
            }
            &Op::Gelu { x } => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((d, gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad_scalar(xi);
                    }
                }
            }
            &Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((d, gv), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Softmax { x } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = nodes[gamma.0].value.data();
                let c = gam.len();
                if let Some(dg) = grad_slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, gv), h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gv * h;
                        }
                    }
                }
                if let Some(db) = grad_slot(nodes, grads, *beta) {
                    for gr in g.chunks(c) {
                        add_into(db, gr);
                    }
                }
                if let Some(dx) = grad_slot(nodes, grads, *x) {
                    let cf = c as f64;
                    let mut dxhat = vec![0.0; c];
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dh: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        let dr = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            dr[j] += inv / cf * (cf * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    add_into(dx, g);
                }
            }
            &Op::SplitHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let r = s.len();
                let (j, c) = (s[r - 2], s[r - 1]);
                let batch: usize = s[..r - 2].iter().product();
                let d = c / heads;
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for b in 0..batch {
                        for h in 0..heads {
                            for row in 0..j {
                                let o = ((b * heads + h) * j + row) * d;
                                let si = (b * j + row) * c + h * d;
                                add_into(&mut dx[si..si + d], &g[o..o + d]);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, heads } => {
                let s = nodes[x.0].value.shape();
                let r = s.len();
                let (j, d) = (s[r - 2], s[r - 1]);
                let batch: usize = s[..r - 3].iter().product();
                let c = heads * d;
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for b in 0..batch {
                        for h in 0..heads {
                            for row in 0..j {
                                let xi = ((b * heads + h) * j + row) * d;
                                let o = (b * j + row) * c + h * d;
                                add_into(&mut dx[xi..xi + d], &g[o..o + d]);
                            }
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    let scale = g[0] / dx.len().max(1) as f64;
                    dx.iter_mut().for_each(|d| *d += scale);
                }
            }
            &Op::SumLastDim { x } => {
                let c = *nodes[x.0].value.shape().last().unwrap();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for (dr, gv) in dx.chunks_mut(c).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            &Op::Sqrt { x } => {
                let y = node.value.data();
                if let Some(dx) = grad_slot(nodes, grads, x) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        if *yv > 0.0 {
                            *d += gv / (2.0 * yv);
                        }
                    }
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer for an input that requires one.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
