use serde::{Deserialize, Serialize};
use std::fmt;

use super::EngineError;
use crate::serde_util;

/// Additive mask sentinel. Finite so that adding two blocked entries can
/// never produce NaN.
pub const NEG_MASK: f64 = -1e9;

/// Simulated numeric format. Values are always stored as `f64`; a tensor
/// tagged with a narrower format only holds values on that format's grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f64")]
    F64Sim,
    #[serde(rename = "f32")]
    F32Sim,
    #[serde(rename = "f16")]
    F16Sim,
    #[serde(rename = "bf16")]
    BF16Sim,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::F64Sim, DType::F32Sim, DType::F16Sim, DType::BF16Sim];

    /// Rounds to the nearest representable value (ties to even). Values past
    /// the format's largest finite magnitude become infinite.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F64Sim => x,
            DType::F32Sim => x as f32 as f64,
            DType::F16Sim => half::f16::from_f64(x).to_f64(),
            DType::BF16Sim => half::bf16::from_f64(x).to_f64(),
        }
    }

    pub fn unit_roundoff(self) -> f64 {
        match self {
            DType::F64Sim => f64::EPSILON / 2.0,
            DType::F32Sim => f32::EPSILON as f64 / 2.0,
            DType::F16Sim => 2f64.powi(-11),
            DType::BF16Sim => 2f64.powi(-8),
        }
    }

    /// Largest finite magnitude.
    pub fn max_finite(self) -> f64 {
        match self {
            DType::F64Sim => f64::MAX,
            DType::F32Sim => f32::MAX as f64,
            DType::F16Sim => half::f16::MAX.to_f64(),
            DType::BF16Sim => half::bf16::MAX.to_f64(),
        }
    }

    fn width(self) -> u8 {
        match self {
            DType::F64Sim => 3,
            DType::F32Sim => 2,
            DType::F16Sim | DType::BF16Sim => 1,
        }
    }

    /// Result format of a binary op on `self` and `other`.
    pub fn promote(self, other: DType) -> DType {
        if self == other {
            return self;
        }
        match self.width().cmp(&other.width()) {
            std::cmp::Ordering::Greater => self,
            std::cmp::Ordering::Less => other,
            // f16 with bf16: neither holds the other
            std::cmp::Ordering::Equal => DType::F32Sim,
        }
    }

    /// Tolerance on |row sum - 1| for softmax rows stored in this format.
    /// Rounding each weight of a probability row moves the sum by at most
    /// one unit roundoff, so the bound is 1e-6 or twice the roundoff.
    pub fn row_sum_tolerance(self) -> f64 {
        match self {
            DType::F64Sim | DType::F32Sim => 1e-6,
            DType::F16Sim => 1e-3,
            DType::BF16Sim => 1e-2,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F64Sim => "f64",
            DType::F32Sim => "f32",
            DType::F16Sim => "f16",
            DType::BF16Sim => "bf16",
        })
    }
}

/// Dense row-major array with a numeric-format tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    #[serde(with = "serde_util::vec_real")]
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self, EngineError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(EngineError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, dtype, data })
    }

    /// Builds a tensor and rounds every element onto the format's grid.
    pub fn quantized(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Self, EngineError> {
        let mut t = Tensor::new(shape, dtype, data)?;
        t.requantize();
        Ok(t)
    }

    pub(crate) fn from_parts(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype != DType::F64Sim {
            data.iter_mut().for_each(|x| *x = dtype.round(*x));
        }
        Tensor { shape, dtype, data }
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            dtype,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, dtype: DType, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape, dtype, vec![value; n])
    }

    /// Square identity matrix.
    pub fn eye(n: usize, dtype: DType) -> Self {
        let mut t = Tensor::zeros(vec![n, n], dtype);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[offset_of(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = offset_of(&self.shape, index);
        self.data[off] = self.dtype.round(value);
    }

    /// Mutable access without re-rounding; callers must keep values on grid.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, EngineError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(EngineError::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    fn requantize(&mut self) {
        let dt = self.dtype;
        if dt != DType::F64Sim {
            self.data.iter_mut().for_each(|x| *x = dt.round(*x));
        }
    }

    /// Elementwise map that keeps shape and tag (result re-rounded).
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.dtype, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn nan_count(&self) -> usize {
        self.data.iter().filter(|x| x.is_nan()).count()
    }

    pub fn inf_count(&self) -> usize {
        self.data.iter().filter(|x| x.is_infinite()).count()
    }

    /// Largest elementwise |a - b|; NaN on either side (but not both) counts
    /// as infinite. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| abs_diff(a, b))
                .fold(0.0, f64::max),
        )
    }
}

pub(crate) fn abs_diff(a: f64, b: f64) -> f64 {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => f64::INFINITY,
        _ if a == b => 0.0,
        _ => (a - b).abs(),
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn offset_of(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    index
        .iter()
        .zip(shape)
        .zip(strides_of(shape))
        .map(|((&i, &d), s)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            i * s
        })
        .sum()
}

/// Shape both operands broadcast to, aligning trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k < rank - a.len() { 1 } else { a[k - (rank - a.len())] };
        let db = if k < rank - b.len() { 1 } else { b[k - (rank - b.len())] };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offset into a tensor of shape `src` for a multi-index over the
/// broadcast shape `dst` (trailing-aligned, size-1 dims repeat).
pub(crate) fn broadcast_offset(src: &[usize], src_strides: &[usize], dst_index: &[usize]) -> usize {
    let lead = dst_index.len() - src.len();
    src.iter()
        .enumerate()
        .map(|(k, &d)| if d == 1 { 0 } else { dst_index[lead + k] * src_strides[k] })
        .sum()
}

/// Iterates all multi-indices of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut k = shape.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}
