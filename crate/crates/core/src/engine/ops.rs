//! Attention building blocks. All functions are pure; outputs are new
//! tensors rounded onto their result format.

use rand::Rng as _;

use super::tensor::{
    broadcast_offset, broadcast_shape, for_each_index, DType, Tensor, NEG_MASK,
};
use super::EngineError;
use crate::rng::Rng;

/// How a kernel accumulates dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accumulate {
    Exact,
    /// Every product and every partial sum is rounded to this format.
    Rounded(DType),
}

#[inline]
fn dot(a: &[f64], b: &[f64], acc: Accumulate) -> f64 {
    match acc {
        Accumulate::Exact => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Accumulate::Rounded(dt) => a
            .iter()
            .zip(b)
            .fold(0.0, |s, (x, y)| dt.round(s + dt.round(x * y))),
    }
}

pub fn quantize(t: &Tensor, dtype: DType) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), dtype, t.data().to_vec())
}

/// `[rows, k] x [k, n]` with `b` given row-major as `[k, n]`.
fn matmul_rows(a: &[f64], rows: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    let mut col = vec![0.0; k];
    for j in 0..n {
        for (p, c) in col.iter_mut().enumerate() {
            *c = b[p * n + j];
        }
        for i in 0..rows {
            out[i * n + j] = dot(&a[i * k..(i + 1) * k], &col, Accumulate::Exact);
        }
    }
    out
}

/// Plain projection `x · w` for `x: [B, L, d_m]`, `w: [d_m, d]`.
pub fn project(x: &Tensor, w: &Tensor) -> Result<Tensor, EngineError> {
    if x.rank() != 3 || w.rank() != 2 || x.shape()[2] != w.shape()[0] {
        return Err(EngineError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (b, l, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = w.shape()[1];
    let data = matmul_rows(x.data(), b * l, k, w.data(), n);
    Ok(Tensor::from_parts(vec![b, l, n], w.dtype(), data))
}

/// Query, key and value projections. Each output carries the format of its
/// weight; mismatched formats are allowed here and flagged by diagnosis.
pub fn qkv_project(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), EngineError> {
    Ok((project(x, wq)?, project(x, wk)?, project(x, wv)?))
}

/// `[B, L, d]` to `[B, n_heads, L, d / n_heads]`.
pub fn split_heads(t: &Tensor, n_heads: usize) -> Result<Tensor, EngineError> {
    if t.rank() != 3 {
        return Err(EngineError::ShapeMismatch {
            left: t.shape().to_vec(),
            right: vec![0, 0, 0],
        });
    }
    let (b, l, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(EngineError::IndivisibleHeads { dim: d, heads: n_heads });
    }
    let dh = d / n_heads;
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for h in 0..n_heads {
            for li in 0..l {
                let dst = ((bi * n_heads + h) * l + li) * dh;
                let s = (bi * l + li) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    Tensor::new(vec![b, n_heads, l, dh], t.dtype(), out)
}

/// Inverse of [`split_heads`]: `[B, h, L, dh]` to `[B, L, h * dh]`.
pub fn merge_heads(t: &Tensor) -> Result<Tensor, EngineError> {
    if t.rank() != 4 {
        return Err(EngineError::ShapeMismatch {
            left: t.shape().to_vec(),
            right: vec![0, 0, 0, 0],
        });
    }
    let (b, h, l, dh) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for hi in 0..h {
            for li in 0..l {
                let s = ((bi * h + hi) * l + li) * dh;
                let dst = (bi * l + li) * h * dh + hi * dh;
                out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
            }
        }
    }
    Tensor::new(vec![b, l, h * dh], t.dtype(), out)
}

/// Faulty head merge: every head slot receives the sum over heads.
pub fn merge_heads_summed(t: &Tensor) -> Result<Tensor, EngineError> {
    let merged = merge_heads(t)?;
    let (b, h, l, dh) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let src = merged.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..b * l {
        for c in 0..dh {
            let s: f64 = (0..h).map(|hi| src[row * h * dh + hi * dh + c]).sum();
            for hi in 0..h {
                out[row * h * dh + hi * dh + c] = s;
            }
        }
    }
    Ok(Tensor::from_parts(merged.shape().to_vec(), merged.dtype(), out))
}

fn check_leading(a: &Tensor, b: &Tensor) -> Result<(), EngineError> {
    if a.rank() != 4 || b.rank() != 4 || a.shape()[..2] != b.shape()[..2] {
        return Err(EngineError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `Q · Kᵀ`, divided by `√d_k` when scaling is enabled.
pub fn scaled_scores(q: &Tensor, k: &Tensor, scaling_enabled: bool) -> Result<Tensor, EngineError> {
    scores_with(q, k, scaling_enabled, Accumulate::Exact)
}

pub(crate) fn scores_with(
    q: &Tensor,
    k: &Tensor,
    scaling_enabled: bool,
    acc: Accumulate,
) -> Result<Tensor, EngineError> {
    if q.last_dim() != k.last_dim() {
        return Err(EngineError::QkDimMismatch {
            d_q: q.last_dim(),
            d_k: k.last_dim(),
        });
    }
    check_leading(q, k)?;
    let (b, h, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let lk = k.shape()[2];
    let scale = if scaling_enabled { (d as f64).sqrt() } else { 1.0 };
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; b * h * lq * lk];
    for bh in 0..b * h {
        for i in 0..lq {
            let qi = &qd[(bh * lq + i) * d..(bh * lq + i + 1) * d];
            for j in 0..lk {
                let kj = &kd[(bh * lk + j) * d..(bh * lk + j + 1) * d];
                let s = dot(qi, kj, acc);
                out[(bh * lq + i) * lk + j] = if scaling_enabled { s / scale } else { s };
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![b, h, lq, lk],
        q.dtype().promote(k.dtype()),
        out,
    ))
}

/// `W · V` for `W: [B, h, Lq, Lk]`, `V: [B, h, Lk, dv]`.
pub fn aggregate(w: &Tensor, v: &Tensor) -> Result<Tensor, EngineError> {
    aggregate_with(w, v, Accumulate::Exact)
}

pub(crate) fn aggregate_with(w: &Tensor, v: &Tensor, acc: Accumulate) -> Result<Tensor, EngineError> {
    check_leading(w, v)?;
    if w.shape()[3] != v.shape()[2] {
        return Err(EngineError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (b, h, lq, lk) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let dv = v.shape()[3];
    let (wd, vd) = (w.data(), v.data());
    let mut out = vec![0.0; b * h * lq * dv];
    let mut col = vec![0.0; lk];
    for bh in 0..b * h {
        for c in 0..dv {
            for (j, x) in col.iter_mut().enumerate() {
                *x = vd[(bh * lk + j) * dv + c];
            }
            for i in 0..lq {
                let wi = &wd[(bh * lq + i) * lk..(bh * lq + i + 1) * lk];
                out[(bh * lq + i) * dv + c] = dot(wi, &col, acc);
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![b, h, lq, dv],
        w.dtype().promote(v.dtype()),
        out,
    ))
}

/// `[L, L]` additive mask blocking every key after the query.
pub fn build_causal_mask(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        for j in i + 1..l {
            data[i * l + j] = NEG_MASK;
        }
    }
    Tensor::from_parts(vec![l, l], DType::F64Sim, data)
}

/// `[B, 1, 1, L]` mask from per-position validity flags (1 = token, 0 = pad).
pub fn build_padding_mask(padding: &[u8], batch: usize, l: usize) -> Result<Tensor, EngineError> {
    if padding.len() != batch * l {
        return Err(EngineError::ShapeMismatch {
            left: vec![padding.len()],
            right: vec![batch, l],
        });
    }
    let data = padding
        .iter()
        .map(|&p| if p == 0 { NEG_MASK } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(vec![batch, 1, 1, l], DType::F64Sim, data))
}

/// Elementwise minimum under broadcasting, so that an entry blocked by
/// either mask stays exactly at the sentinel.
pub fn combine_masks(a: &Tensor, b: &Tensor) -> Result<Tensor, EngineError> {
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| EngineError::BroadcastError {
        mask: a.shape().to_vec(),
        scores: b.shape().to_vec(),
    })?;
    let (sa, sb) = (a.strides(), b.strides());
    let mut out = Vec::with_capacity(shape.iter().product());
    for_each_index(&shape, |idx| {
        let x = a.data()[broadcast_offset(a.shape(), &sa, idx)];
        let y = b.data()[broadcast_offset(b.shape(), &sb, idx)];
        out.push(x.min(y));
    });
    Ok(Tensor::from_parts(shape, a.dtype().promote(b.dtype()), out))
}

/// `scores + mask` with the mask broadcast onto the scores' shape.
pub fn apply_mask(s: &Tensor, m: &Tensor) -> Result<Tensor, EngineError> {
    let compatible = m.rank() <= s.rank()
        && broadcast_shape(m.shape(), s.shape()).as_deref() == Some(s.shape());
    if !compatible {
        return Err(EngineError::BroadcastError {
            mask: m.shape().to_vec(),
            scores: s.shape().to_vec(),
        });
    }
    let ms = m.strides();
    let mut out = Vec::with_capacity(s.len());
    let mut flat = 0;
    for_each_index(s.shape(), |idx| {
        out.push(s.data()[flat] + m.data()[broadcast_offset(m.shape(), &ms, idx)]);
        flat += 1;
    });
    Ok(Tensor::from_parts(
        s.shape().to_vec(),
        s.dtype().promote(m.dtype()),
        out,
    ))
}

/// Max-subtracted softmax over the last axis. A row holding NaN, or whose
/// maximum is infinite, comes out as NaN.
pub fn softmax_rows(s: &Tensor) -> Tensor {
    let n = s.last_dim();
    let mut out = s.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    Tensor::from_parts(s.shape().to_vec(), s.dtype(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| {
        if m.is_nan() || x.is_nan() {
            f64::NAN
        } else {
            m.max(x)
        }
    });
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Per-row normalised Shannon entropy with its overall mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyStats {
    pub per_row: Vec<f64>,
    pub mean: f64,
}

/// `H_i = -Σ_j W_ij ln W_ij / ln(n)` with `0 · ln 0 = 0`; rows of length one
/// have entropy 0. Every row must sum to one within 1e-6.
pub fn row_entropy_normalized(w: &Tensor) -> Result<EntropyStats, EngineError> {
    let n = w.last_dim();
    let mut per_row = Vec::with_capacity(w.len() / n.max(1));
    for (i, row) in w.data().chunks(n.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if sum.is_nan() || (sum - 1.0).abs() > 1e-6 {
            return Err(EngineError::NotRowStochastic { row: i, sum });
        }
        per_row.push(normalized_entropy(row));
    }
    let mean = if per_row.is_empty() {
        0.0
    } else {
        per_row.iter().sum::<f64>() / per_row.len() as f64
    };
    Ok(EntropyStats { per_row, mean })
}

pub(crate) fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let h: f64 = row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h / (row.len() as f64).ln()
}

/// Inverted dropout: each element is zeroed with probability `rate`, the
/// rest scaled by `1 / (1 - rate)`. Draws one uniform per element.
pub fn dropout(t: &Tensor, rate: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 - rate;
    let data = t
        .data()
        .iter()
        .map(|&x| if rng.random::<f64>() < rate { 0.0 } else { x / keep })
        .collect();
    Tensor::from_parts(t.shape().to_vec(), t.dtype(), data)
}

/// Logit dropout: dropped entries are set to the mask sentinel.
pub fn dropout_logits(t: &Tensor, rate: f64, rng: &mut Rng) -> Tensor {
    let data = t
        .data()
        .iter()
        .map(|&x| if rng.random::<f64>() < rate { NEG_MASK } else { x })
        .collect();
    Tensor::from_parts(t.shape().to_vec(), t.dtype().promote(DType::F64Sim), data)
}
