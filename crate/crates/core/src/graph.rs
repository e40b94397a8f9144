//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! A [`Graph`] is rebuilt per batch: forward calls record nodes in
//! topological order, [`Graph::backward`] replays them in reverse and
//! accumulates vector-Jacobian products. Every op validates shapes up front
//! and checks its output for non-finite values, so numeric blowups surface
//! as errors instead of propagating silently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{strides_of, Tensor};
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f32 = 1e-5;

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Transpose { x: NodeId, ax0: usize, ax1: usize },
    Reshape { x: NodeId },
    SoftmaxLastDim { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Gelu { x: NodeId },
    EmbeddingLookup { table: NodeId, ids: Vec<u32> },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Scale { x: NodeId, factor: f32 },
    MaskFill { x: NodeId, mask: Tensor },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape. Nodes are appended in execution order, which is also
/// a valid topological order for the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { param: true })
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("leaf", Op::Leaf { param: false }, value)
    }

    /// Record a trainable input; `backward` returns a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("param", Op::Leaf { param: true }, value)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Matrix product over the trailing two axes. The right operand is
    /// either rank-2 (shared across all leading batches of `a`) or carries
    /// the same leading dims as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul_value(self.value(a), self.value(b))?;
        self.push("matmul", Op::MatMul { a, b }, v)
    }

    /// Elementwise add; `b`'s shape must be a trailing suffix of `a`'s
    /// (equal shapes included), broadcasting over the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = add_value(self.value(a), self.value(b))?;
        self.push("add", Op::Add { a, b }, v)
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(av.shape(), data)?;
        self.push("mul", Op::Mul { a, b }, v)
    }

    pub fn transpose(&mut self, x: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let v = transpose_value(self.value(x), ax0, ax1)?;
        self.push("transpose", Op::Transpose { x, ax0, ax1 }, v)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        self.push("reshape", Op::Reshape { x }, v)
    }

    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let v = softmax_value(self.value(x))?;
        self.push("softmax_lastdim", Op::SoftmaxLastDim { x }, v)
    }

    /// Last-dimension layer norm with affine gain/bias. Variance is floored
    /// at eps, so constant rows normalize to zero before the affine part.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = layer_norm_value(self.value(x), self.value(gain), self.value(bias))?;
        self.push("layer_norm", Op::LayerNorm { x, gain, bias }, v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_f(v)).collect();
        let v = Tensor::from_vec(xv.shape(), data)?;
        self.push("gelu", Op::Gelu { x }, v)
    }

    /// Gather rows of an embedding table: `(rows, cols)` ids against a
    /// `(V, H)` table yield `(rows, cols, H)`.
    pub fn embedding_lookup(
        &mut self,
        table: NodeId,
        ids: &[u32],
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(shape_err("embedding_lookup", tv.shape(), &[rows, cols]));
        }
        if ids.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("{rows}x{cols} wants {} ids, got {}", rows * cols, ids.len()),
            });
        }
        let (v, h) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v as u32 });
            }
            let row = id as usize * h;
            data.extend_from_slice(&tv.data()[row..row + h]);
        }
        let value = Tensor::from_vec(&[rows, cols, h], data)?;
        let op = Op::EmbeddingLookup { table, ids: ids.to_vec() };
        self.push("embedding_lookup", op, value)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = slice_value(self.value(x), axis, start, len)?;
        self.push("slice", Op::Slice { x, axis, start, len }, v)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        let v = concat_value(self.value(a), self.value(b), axis)?;
        self.push("concat", Op::Concat { a, b, axis }, v)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> Result<NodeId> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let v = Tensor::from_vec(xv.shape(), data)?;
        self.push("scale", Op::Scale { x, factor }, v)
    }

    /// Where `mask` is 0, replace the element with `value`; where 1, pass
    /// through. The mask's shape must be a trailing suffix of the input's.
    pub fn mask_fill(&mut self, x: NodeId, mask: &Tensor, value: f32) -> Result<NodeId> {
        let xv = self.value(x);
        if !is_suffix(xv.shape(), mask.shape()) {
            return Err(shape_err("mask_fill", xv.shape(), mask.shape()));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::ShapeMismatch {
                op: "mask_fill",
                detail: String::from("mask entries must be 0 or 1"),
            });
        }
        let mn = mask.numel();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.data()[i % mn] == 0.0 { value } else { v })
            .collect();
        let v = Tensor::from_vec(xv.shape(), data)?;
        self.push("mask_fill", Op::MaskFill { x, mask: mask.clone() }, v)
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push("sum_all", Op::SumAll { x }, Tensor::scalar(s as f32))
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let v = Tensor::scalar((s / xv.numel() as f64) as f32);
        self.push("mean_all", Op::MeanAll { x }, v)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient for every
    /// parameter node (zero where the loss does not depend on it);
    /// intermediate gradients are dropped as soon as their consumers are
    /// done.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { numel: lv.numel() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !g.is_all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if *param {
                        grads[id] = Some(g);
                    }
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (da, db) = matmul_vjp(self.value(*a), self.value(*b), &g)?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add { a, b } => {
                    let db = reduce_to_suffix(&g, self.value(*b).shape());
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Mul { a, b } => {
                    let da = elementwise_product(&g, self.value(*b));
                    let db = elementwise_product(&g, self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Transpose { x, ax0, ax1 } => {
                    accumulate(&mut grads[x.0], transpose_value(&g, *ax0, *ax1)?);
                }
                Op::Reshape { x } => {
                    accumulate(&mut grads[x.0], g.reshaped(self.value(*x).shape())?);
                }
                Op::SoftmaxLastDim { x } => {
                    accumulate(&mut grads[x.0], softmax_vjp(&self.nodes[id].value, &g));
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dg, db) =
                        layer_norm_vjp(self.value(*x), self.value(*gain), &g);
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[gain.0], dg);
                    accumulate(&mut grads[bias.0], db);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gg)| gg * gelu_df(v))
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.shape(), data)?);
                }
                Op::EmbeddingLookup { table, ids } => {
                    let tv = self.value(*table);
                    let h = tv.shape()[1];
                    let mut dt = Tensor::zeros(tv.shape());
                    for (slot, &id) in ids.iter().enumerate() {
                        let src = &g.data()[slot * h..(slot + 1) * h];
                        let dst = &mut dt.data_mut()[id as usize * h..id as usize * h + h];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::Slice { x, axis, start, len } => {
                    let dx = slice_vjp(self.value(*x).shape(), &g, *axis, *start, *len);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat { a, b, axis } => {
                    let a_len = self.value(*a).shape()[*axis];
                    let da = slice_value(&g, *axis, 0, a_len)?;
                    let db = slice_value(&g, *axis, a_len, self.value(*b).shape()[*axis])?;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale { x, factor } => {
                    let data = g.data().iter().map(|&v| v * factor).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape(), data)?);
                }
                Op::MaskFill { x, mask } => {
                    let mn = mask.numel();
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| if mask.data()[i % mn] == 0.0 { 0.0 } else { v })
                        .collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(g.shape(), data)?);
                }
                Op::SumAll { x } => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor::full(xv.shape(), g.item()));
                }
                Op::MeanAll { x } => {
                    let xv = self.value(*x);
                    let val = g.item() / xv.numel() as f32;
                    accumulate(&mut grads[x.0], Tensor::full(xv.shape(), val));
                }
            }
        }

        // Parameters untouched by the loss still get a (zero) gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf { param: true }) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by one backward sweep, indexed by `NodeId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter node; panics if `id` is not a parameter.
    pub fn of(&self, id: NodeId) -> &Tensor {
        self.grads[id.0].as_ref().expect("gradient requested for a non-parameter node")
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch { op, detail: format!("{a:?} vs {b:?}") }
}

fn is_suffix(full: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix
}

// ── kernels ─────────────────────────────────────────────────────────────

fn gelu_f(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + libm::tanhf(inner))
}

fn gelu_df(x: f32) -> f32 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = libm::tanhf(inner);
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn matmul_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, br) = (a.rank(), b.rank());
    if ar < 2 || br < 2 {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    let a_lead = &a.shape()[..ar - 2];
    let b_lead = &b.shape()[..br - 2];
    let shared_rhs = b_lead.is_empty();
    if k != kb || (!shared_rhs && a_lead != b_lead) {
        return Err(shape_err("matmul", a.shape(), b.shape()));
    }
    let batch: usize = a_lead.iter().product();
    let mut out = vec![0.0f32; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if shared_rhs { 0 } else { bi * k * n };
        mm_accum(
            &a.data()[a_off..a_off + m * k],
            &b.data()[b_off..b_off + k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a_lead.to_vec();
    shape.push(m);
    shape.push(n);
    Tensor::from_vec(&shape, out)
}

/// C += A @ B for row-major (m,k) x (k,n).
fn mm_accum(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A @ B^T for row-major (m,n) x (k,n) -> (m,k).
fn mm_accum_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// C += A^T @ B for row-major (m,k) x (m,n) -> (k,n).
fn mm_accum_at(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (ar, br) = (a.rank(), b.rank());
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let n = b.shape()[br - 1];
    let shared_rhs = br == 2 && ar > 2;
    let batch: usize = a.shape()[..ar - 2].iter().product();

    let mut da = vec![0.0f32; a.numel()];
    let mut db = vec![0.0f32; b.numel()];
    for bi in 0..batch {
        let g_sl = &g.data()[bi * m * n..(bi + 1) * m * n];
        let a_sl = &a.data()[bi * m * k..(bi + 1) * m * k];
        let b_off = if shared_rhs { 0 } else { bi * k * n };
        let b_sl = &b.data()[b_off..b_off + k * n];
        // dA = g @ B^T, dB = A^T @ g
        mm_accum_bt(g_sl, b_sl, &mut da[bi * m * k..(bi + 1) * m * k], m, n, k);
        mm_accum_at(a_sl, g_sl, &mut db[b_off..b_off + k * n], m, k, n);
    }
    Ok((Tensor::from_vec(a.shape(), da)?, Tensor::from_vec(b.shape(), db)?))
}

fn add_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if !is_suffix(a.shape(), b.shape()) {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let bn = b.numel();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + b.data()[i % bn])
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Sum a gradient down to a trailing-suffix shape.
fn reduce_to_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let on = out.numel();
    for (i, &v) in g.data().iter().enumerate() {
        out.data_mut()[i % on] += v;
    }
    out
}

fn elementwise_product(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same-shape product")
}

fn transpose_value(x: &Tensor, ax0: usize, ax1: usize) -> Result<Tensor> {
    let rank = x.rank();
    if ax0 >= rank || ax1 >= rank {
        return Err(Error::ShapeMismatch {
            op: "transpose",
            detail: format!("axes ({ax0},{ax1}) out of range for rank {rank}"),
        });
    }
    let mut shape = x.shape().to_vec();
    shape.swap(ax0, ax1);
    let in_strides = strides_of(x.shape());
    let out_shape = shape;
    let mut data = vec![0.0f32; x.numel()];
    let mut coords = vec![0usize; rank];
    for (out_flat, slot) in data.iter_mut().enumerate() {
        // coords of out_flat in out_shape, then swap back into input space
        let mut rem = out_flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        coords.swap(ax0, ax1);
        let in_flat: usize = coords.iter().zip(&in_strides).map(|(c, s)| c * s).sum();
        *slot = x.data()[in_flat];
    }
    Tensor::from_vec(&out_shape, data)
}

fn softmax_value(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(shape_err("softmax_lastdim", x.shape(), &[]));
    }
    let last = x.shape()[x.rank() - 1];
    let mut data = vec![0.0f32; x.numel()];
    for (row_in, row_out) in x.data().chunks(last).zip(data.chunks_mut(last)) {
        let max = row_in.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = libm::expf(v - max);
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::from_vec(x.shape(), data)
}

fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let last = y.shape()[y.rank() - 1];
    let mut data = vec![0.0f32; y.numel()];
    for ((y_row, g_row), out_row) in y
        .data()
        .chunks(last)
        .zip(g.data().chunks(last))
        .zip(data.chunks_mut(last))
    {
        let dot: f32 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in out_row.iter_mut().zip(y_row).zip(g_row) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::from_vec(y.shape(), data).expect("softmax vjp shape")
}

fn layer_norm_value(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    let h = x.shape()[x.rank() - 1];
    if gain.shape() != [h] || bias.shape() != [h] {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            detail: format!(
                "gain {:?} / bias {:?} must be [{h}] for input {:?}",
                gain.shape(),
                bias.shape(),
                x.shape()
            ),
        });
    }
    let mut data = vec![0.0f32; x.numel()];
    for (row_in, row_out) in x.data().chunks(h).zip(data.chunks_mut(h)) {
        let (mean, inv) = row_stats(row_in);
        for ((o, &v), (&g, &b)) in row_out
            .iter_mut()
            .zip(row_in)
            .zip(gain.data().iter().zip(bias.data()))
        {
            *o = (v - mean) * inv * g + b;
        }
    }
    Tensor::from_vec(x.shape(), data)
}

fn row_stats(row: &[f32]) -> (f32, f32) {
    let h = row.len() as f32;
    let mean = row.iter().sum::<f32>() / h;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / h;
    (mean, 1.0 / libm::sqrtf(var + LAYER_NORM_EPS))
}

fn layer_norm_vjp(x: &Tensor, gain: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let h = x.shape()[x.rank() - 1];
    let hf = h as f32;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgain = vec![0.0f32; h];
    let mut dbias = vec![0.0f32; h];
    for (row_idx, (row_in, g_row)) in x.data().chunks(h).zip(g.data().chunks(h)).enumerate() {
        let (mean, inv) = row_stats(row_in);
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for j in 0..h {
            let xhat = (row_in[j] - mean) * inv;
            let dxhat = g_row[j] * gain.data()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[j] += g_row[j] * xhat;
            dbias[j] += g_row[j];
        }
        let out_row = &mut dx[row_idx * h..(row_idx + 1) * h];
        for j in 0..h {
            let xhat = (row_in[j] - mean) * inv;
            let dxhat = g_row[j] * gain.data()[j];
            out_row[j] = inv * (dxhat - sum_dxhat / hf - xhat * sum_dxhat_xhat / hf);
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("ln vjp dx"),
        Tensor::from_vec(&[h], dgain).expect("ln vjp dgain"),
        Tensor::from_vec(&[h], dbias).expect("ln vjp dbias"),
    )
}

fn slice_value(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axis >= rank || start + len > x.shape()[axis] || len == 0 {
        return Err(Error::ShapeMismatch {
            op: "slice",
            detail: format!("axis {axis}, [{start}..{}) of {:?}", start + len, x.shape()),
        });
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let mid = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * mid * inner + start * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(&shape, data)
}

fn slice_vjp(x_shape: &[usize], g: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let outer: usize = x_shape[..axis].iter().product();
    let mid = x_shape[axis];
    let inner: usize = x_shape[axis + 1..].iter().product();
    let mut dx = Tensor::zeros(x_shape);
    for o in 0..outer {
        let dst = o * mid * inner + start * inner;
        let src = o * len * inner;
        dx.data_mut()[dst..dst + len * inner]
            .copy_from_slice(&g.data()[src..src + len * inner]);
    }
    dx
}

fn concat_value(a: &Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = a.rank();
    if rank != b.rank() || axis >= rank {
        return Err(shape_err("concat", a.shape(), b.shape()));
    }
    for d in 0..rank {
        if d != axis && a.shape()[d] != b.shape()[d] {
            return Err(shape_err("concat", a.shape(), b.shape()));
        }
    }
    let outer: usize = a.shape()[..axis].iter().product();
    let inner: usize = a.shape()[axis + 1..].iter().product();
    let (am, bm) = (a.shape()[axis], b.shape()[axis]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * am * inner..(o + 1) * am * inner]);
        data.extend_from_slice(&b.data()[o * bm * inner..(o + 1) * bm * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[axis] = am + bm;
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let id = g.leaf(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = g.matmul(a, id).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[2, 3], &[0.; 6])).unwrap();
        let b = g.leaf(t(&[2, 2], &[0.; 4])).unwrap();
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0., 0.])).unwrap();
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[3., 3., 3., 3.])).unwrap();
        let gain = g.leaf(Tensor::full(&[4], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 0., 0.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(w * w), w = [3] -> dL/dw = [6]
        let mut g = Graph::new();
        let w = g.param(t(&[1], &[3.])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(w).data(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(&[3], &[1., 2., 3.])).unwrap();
        let u = g.param(t(&[2], &[5., 6.])).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(u).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.param(t(&[2], &[1., 2.])).unwrap();
        let y = g.mul(w, w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss { numel: 2 })));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(matches!(
            g.leaf(t(&[1], &[f32::NAN])),
            Err(Error::NonFinite { op: "leaf" })
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f32).collect::<Vec<_>>());
        let y = transpose_value(&x, 0, 2).unwrap();
        assert_eq!(y.shape(), &[4, 3, 2]);
        let z = transpose_value(&y, 0, 2).unwrap();
        assert!(z.bit_eq(&x));
    }

    #[test]
    fn chain_rule_matches_manual_composition() {
        // f(g(x)) with g = gelu, f = sum of squares: df/dx = 2 g(x) g'(x).
        let xs = [0.3f32, -1.2, 2.0];
        let mut g = Graph::new();
        let x = g.param(t(&[3], &xs)).unwrap();
        let gx = g.gelu(x).unwrap();
        let sq = g.mul(gx, gx).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let auto = g.backward(loss).unwrap();
        for (i, &v) in xs.iter().enumerate() {
            let manual = 2.0 * gelu_f(v) * gelu_df(v);
            let got = auto.of(x).data()[i];
            assert!((manual - got).abs() <= 1e-6 * manual.abs().max(1.0));
        }
    }

    #[test]
    fn mask_fill_passes_and_fills() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let mask = t(&[2, 2], &[1., 0., 0., 1.]);
        let y = g.mask_fill(x, &mask, -9.0).unwrap();
        assert_eq!(g.value(y).data(), &[1., -9., -9., 4.]);
    }
}
