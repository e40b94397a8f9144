//! Independent f64 reference kernels and a central-difference harness for
//! verifying autodiff gradients. Nothing here touches the graph engine:
//! every op is re-derived with plain index loops in double precision, so a
//! check failure points at exactly one of the two sides.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Dense f64 tensor for reference computations.
#[derive(Debug, Clone, PartialEq)]
pub struct RefTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RefTensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn from_f32(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &RefTensor, b: &RefTensor) -> RefTensor {
    let ar = a.shape.len();
    let br = b.shape.len();
    let (m, k) = (a.shape[ar - 2], a.shape[ar - 1]);
    let n = b.shape[br - 1];
    let shared = br == 2;
    let batch: usize = a.shape[..ar - 2].iter().product();
    let mut out = vec![0.0f64; batch * m * n];
    for bi in 0..batch {
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = a.data[bi * m * k + i * k + p];
                    let bv = if shared {
                        b.data[p * n + j]
                    } else {
                        b.data[bi * k * n + p * n + j]
                    };
                    s += av * bv;
                }
                out[bi * m * n + i * n + j] = s;
            }
        }
    }
    let mut shape = a.shape[..ar - 2].to_vec();
    shape.push(m);
    shape.push(n);
    RefTensor::new(&shape, out)
}

pub fn add_suffix(a: &RefTensor, b: &RefTensor) -> RefTensor {
    let bn = b.numel();
    let data = a.data.iter().enumerate().map(|(i, &v)| v + b.data[i % bn]).collect();
    RefTensor::new(&a.shape, data)
}

pub fn mul(a: &RefTensor, b: &RefTensor) -> RefTensor {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    RefTensor::new(&a.shape, data)
}

pub fn transpose(x: &RefTensor, ax0: usize, ax1: usize) -> RefTensor {
    let rank = x.shape.len();
    let mut out_shape = x.shape.clone();
    out_shape.swap(ax0, ax1);
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let mut data = vec![0.0f64; x.numel()];
    let mut coords = vec![0usize; rank];
    for (out_flat, slot) in data.iter_mut().enumerate() {
        let mut rem = out_flat;
        for d in (0..rank).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        coords.swap(ax0, ax1);
        let in_flat: usize = coords.iter().zip(&in_strides).map(|(c, s)| c * s).sum();
        *slot = x.data[in_flat];
    }
    RefTensor::new(&out_shape, data)
}

pub fn softmax_lastdim(x: &RefTensor) -> RefTensor {
    let last = *x.shape.last().unwrap();
    let mut data = vec![0.0f64; x.numel()];
    for (row_in, row_out) in x.data.chunks(last).zip(data.chunks_mut(last)) {
        let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = libm::exp(v - max);
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    RefTensor::new(&x.shape, data)
}

pub fn layer_norm(x: &RefTensor, gain: &RefTensor, bias: &RefTensor) -> RefTensor {
    let h = *x.shape.last().unwrap();
    let mut data = vec![0.0f64; x.numel()];
    for (row_in, row_out) in x.data.chunks(h).zip(data.chunks_mut(h)) {
        let mean = row_in.iter().sum::<f64>() / h as f64;
        let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        for j in 0..h {
            row_out[j] = (row_in[j] - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    RefTensor::new(&x.shape, data)
}

pub fn gelu(x: &RefTensor) -> RefTensor {
    let c = libm::sqrt(2.0 / core::f64::consts::PI);
    let data = x
        .data
        .iter()
        .map(|&v| 0.5 * v * (1.0 + libm::tanh(c * (v + 0.044715 * v * v * v))))
        .collect();
    RefTensor::new(&x.shape, data)
}

pub fn embedding(table: &RefTensor, ids: &[u32], rows: usize, cols: usize) -> RefTensor {
    let h = table.shape[1];
    let mut data = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        data.extend_from_slice(&table.data[id as usize * h..(id as usize + 1) * h]);
    }
    RefTensor::new(&[rows, cols, h], data)
}

pub fn slice(x: &RefTensor, axis: usize, start: usize, len: usize) -> RefTensor {
    let outer: usize = x.shape[..axis].iter().product();
    let mid = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * mid * inner + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    RefTensor::new(&shape, data)
}

pub fn concat(a: &RefTensor, b: &RefTensor, axis: usize) -> RefTensor {
    let outer: usize = a.shape[..axis].iter().product();
    let inner: usize = a.shape[axis + 1..].iter().product();
    let (am, bm) = (a.shape[axis], b.shape[axis]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for o in 0..outer {
        data.extend_from_slice(&a.data[o * am * inner..(o + 1) * am * inner]);
        data.extend_from_slice(&b.data[o * bm * inner..(o + 1) * bm * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = am + bm;
    RefTensor::new(&shape, data)
}

pub fn scale(x: &RefTensor, factor: f64) -> RefTensor {
    RefTensor::new(&x.shape, x.data.iter().map(|&v| v * factor).collect())
}

pub fn mask_fill(x: &RefTensor, mask: &RefTensor, value: f64) -> RefTensor {
    let mn = mask.numel();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.data[i % mn] == 0.0 { value } else { v })
        .collect();
    RefTensor::new(&x.shape, data)
}

pub fn sum_all(x: &RefTensor) -> f64 {
    x.data.iter().sum()
}

pub fn mean_all(x: &RefTensor) -> f64 {
    sum_all(x) / x.numel() as f64
}

/// Reference pre-norm block forward, written with direct index loops (no
/// reshape/transpose plumbing). Params are the sixteen block tensors in
/// canonical order.
pub fn block_forward(params: &[RefTensor], x: &RefTensor, n_heads: usize) -> RefTensor {
    let (n, t, h) = (x.shape[0], x.shape[1], x.shape[2]);
    let dh = h / n_heads;
    let linear = |x: &RefTensor, w: &RefTensor, b: &RefTensor| -> RefTensor {
        let out_dim = w.shape[0];
        let in_dim = w.shape[1];
        let samples = x.numel() / in_dim;
        let mut data = vec![0.0f64; samples * out_dim];
        for s in 0..samples {
            for r in 0..out_dim {
                let mut acc = b.data[r];
                for j in 0..in_dim {
                    acc += x.data[s * in_dim + j] * w.data[r * in_dim + j];
                }
                data[s * out_dim + r] = acc;
            }
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = out_dim;
        RefTensor::new(&shape, data)
    };

    let ln1 = layer_norm(x, &params[0], &params[1]);
    let q = linear(&ln1, &params[2], &params[3]);
    let k = linear(&ln1, &params[4], &params[5]);
    let v = linear(&ln1, &params[6], &params[7]);

    // scores[n, head, i, j] then softmax over j with the causal fill
    let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
    let mut ctx = vec![0.0f64; n * t * h];
    for ni in 0..n {
        for head in 0..n_heads {
            for i in 0..t {
                let mut row = vec![0.0f64; t];
                for (j, slot) in row.iter_mut().enumerate() {
                    if j > i {
                        *slot = -1e9;
                        continue;
                    }
                    let mut s = 0.0;
                    for d in 0..dh {
                        let qi = q.data[(ni * t + i) * h + head * dh + d];
                        let kj = k.data[(ni * t + j) * h + head * dh + d];
                        s += qi * kj;
                    }
                    *slot = s * inv_sqrt;
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for slot in row.iter_mut() {
                    *slot = libm::exp(*slot - max);
                    sum += *slot;
                }
                for slot in row.iter_mut() {
                    *slot /= sum;
                }
                for d in 0..dh {
                    let mut acc = 0.0;
                    for (j, &attn) in row.iter().enumerate() {
                        acc += attn * v.data[(ni * t + j) * h + head * dh + d];
                    }
                    ctx[(ni * t + i) * h + head * dh + d] = acc;
                }
            }
        }
    }
    let ctx = RefTensor::new(&[n, t, h], ctx);
    let proj = linear(&ctx, &params[8], &params[9]);
    let x1 = RefTensor::new(
        &x.shape,
        x.data.iter().zip(&proj.data).map(|(a, b)| a + b).collect(),
    );

    let ln2 = layer_norm(&x1, &params[10], &params[11]);
    let mid = gelu(&linear(&ln2, &params[12], &params[13]));
    let down = linear(&mid, &params[14], &params[15]);
    RefTensor::new(
        &x.shape,
        x1.data.iter().zip(&down.data).map(|(a, b)| a + b).collect(),
    )
}

/// Central finite differences of a scalar function at `x`, step `h` per
/// coordinate.
pub fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Elementwise relative-error check of an analytic f32 gradient against a
/// numeric f64 gradient: where |analytic| > `floor`, require
/// |analytic - numeric| / max(|analytic|, |numeric|) < `tol`.
pub fn check_gradient(analytic: &[f32], numeric: &[f64], tol: f64, floor: f64) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(alloc::format!("length mismatch {} vs {}", analytic.len(), numeric.len()));
    }
    for (i, (&a, &nv)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        if a.abs() <= floor {
            continue;
        }
        let rel = (a - nv).abs() / a.abs().max(nv.abs());
        if rel >= tol {
            return Err(alloc::format!(
                "element {i}: analytic {a:.6e} vs numeric {nv:.6e} (rel {rel:.3e})"
            ));
        }
    }
    Ok(())
}
