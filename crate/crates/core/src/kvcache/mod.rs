//! Single-layer key/value cache for incremental decoding, plus a
//! schedule-driven two-replica model.

mod decode;
mod replica;

pub use decode::{incremental_decode, DecodeFault, DecodeOptions};
pub use replica::{replica_step, ReplicaPair, ScheduleItem};

use serde::{Deserialize, Serialize};

use crate::engine::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CacheError {
    #[error("position gap: expected {expected}, got {got}")]
    PositionGap { expected: usize, got: usize },
    #[error("entry width {got} does not match cache width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("no pending append to complete")]
    NoPendingAppend,
}

impl CacheError {
    pub fn kind(&self) -> &'static str {
        match self {
            CacheError::PositionGap { .. } => "position_gap",
            CacheError::WidthMismatch { .. } => "shape_mismatch",
            CacheError::NoPendingAppend => "cache_state",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheLayout {
    #[default]
    Canonical,
    /// Reads interpret the `[T, d]` buffer as `[d, T]`.
    TransposedFaulty,
}

/// One cached token: keys `[B * d_k]` and values `[B * d_v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub position_id: usize,
    /// False while a split write has stored the key but not yet the value.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replica {
    A,
    B,
}

/// Cache snapshot recorded after each decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEvent {
    pub step: usize,
    pub length: usize,
    pub position_ids: Vec<usize>,
    pub layout: CacheLayout,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replica: Option<Replica>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    batch: usize,
    d_k: usize,
    d_v: usize,
    layout: CacheLayout,
    entries: Vec<CacheEntry>,
}

impl KvCache {
    pub fn new(batch: usize, d_k: usize, d_v: usize, layout: CacheLayout) -> Self {
        KvCache {
            batch,
            d_k,
            d_v,
            layout,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layout(&self) -> CacheLayout {
        self.layout
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position_id).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    fn check(&self, k: &[f64], v: &[f64], position_id: usize) -> Result<(), CacheError> {
        if k.len() != self.batch * self.d_k {
            return Err(CacheError::WidthMismatch {
                expected: self.batch * self.d_k,
                got: k.len(),
            });
        }
        if v.len() != self.batch * self.d_v {
            return Err(CacheError::WidthMismatch {
                expected: self.batch * self.d_v,
                got: v.len(),
            });
        }
        if self.layout == CacheLayout::Canonical && position_id != self.len() {
            return Err(CacheError::PositionGap {
                expected: self.len(),
                got: position_id,
            });
        }
        Ok(())
    }

    pub fn append(&mut self, k: Vec<f64>, v: Vec<f64>, position_id: usize) -> Result<(), CacheError> {
        self.check(&k, &v, position_id)?;
        self.entries.push(CacheEntry {
            k,
            v,
            position_id,
            complete: true,
        });
        Ok(())
    }

    /// First half of a split write: the key lands, the value slot reads as
    /// zero until [`KvCache::complete_append`].
    pub fn begin_append(&mut self, k: Vec<f64>, v: &[f64], position_id: usize) -> Result<(), CacheError> {
        self.check(&k, v, position_id)?;
        self.entries.push(CacheEntry {
            k,
            v: vec![0.0; v.len()],
            position_id,
            complete: false,
        });
        Ok(())
    }

    pub fn complete_append(&mut self, v: Vec<f64>) -> Result<(), CacheError> {
        match self.entries.last_mut() {
            Some(e) if !e.complete => {
                e.v = v;
                e.complete = true;
                Ok(())
            }
            _ => Err(CacheError::NoPendingAppend),
        }
    }

    /// Keys as `[B, T, d_k]`, read through the cache layout.
    pub fn keys(&self, dtype: DType) -> Tensor {
        self.read(|e| &e.k, self.d_k, dtype)
    }

    /// Values as `[B, T, d_v]`, read through the cache layout.
    pub fn values(&self, dtype: DType) -> Tensor {
        self.read(|e| &e.v, self.d_v, dtype)
    }

    fn read(&self, field: impl Fn(&CacheEntry) -> &Vec<f64>, d: usize, dtype: DType) -> Tensor {
        let t_len = self.len();
        let mut data = Vec::with_capacity(self.batch * t_len * d);
        for b in 0..self.batch {
            for t in 0..t_len {
                for c in 0..d {
                    let (src_t, src_c) = match self.layout {
                        CacheLayout::Canonical => (t, c),
                        CacheLayout::TransposedFaulty => {
                            let flat = c * t_len + t;
                            (flat / d, flat % d)
                        }
                    };
                    data.push(field(&self.entries[src_t])[b * d + src_c]);
                }
            }
        }
        Tensor::from_parts(vec![self.batch, t_len, d], dtype, data)
    }
}

/// Functional append: returns the extended cache.
pub fn cache_append(
    cache: &KvCache,
    k: Vec<f64>,
    v: Vec<f64>,
    position_id: usize,
) -> Result<KvCache, CacheError> {
    let mut next = cache.clone();
    next.append(k, v, position_id)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(x: f64) -> (Vec<f64>, Vec<f64>) {
        (vec![x, x + 0.5], vec![-x])
    }

    #[test]
    fn append_examples() {
        let empty = KvCache::new(1, 2, 1, CacheLayout::Canonical);
        let (k, v) = entry(1.0);
        let one = cache_append(&empty, k, v, 0).unwrap();
        assert_eq!(one.len(), 1);

        let mut three = one.clone();
        for p in 1..3 {
            let (k, v) = entry(p as f64);
            three.append(k, v, p).unwrap();
        }
        let (k, v) = entry(9.0);
        assert_eq!(
            cache_append(&three, k, v, 5),
            Err(CacheError::PositionGap { expected: 3, got: 5 })
        );
    }

    #[test]
    fn split_write_reads_zero_until_complete() {
        let mut c = KvCache::new(1, 2, 1, CacheLayout::Canonical);
        c.begin_append(vec![1.0, 2.0], &[3.0], 0).unwrap();
        assert_eq!(c.values(DType::F64Sim).data(), &[0.0]);
        c.complete_append(vec![3.0]).unwrap();
        assert_eq!(c.values(DType::F64Sim).data(), &[3.0]);
        assert_eq!(c.complete_append(vec![1.0]), Err(CacheError::NoPendingAppend));
    }

    #[test]
    fn transposed_reads_scramble() {
        let mut canon = KvCache::new(1, 2, 1, CacheLayout::Canonical);
        let mut trans = KvCache::new(1, 2, 1, CacheLayout::TransposedFaulty);
        for p in 0..3 {
            let (k, v) = entry(p as f64 + 1.0);
            canon.append(k.clone(), v.clone(), p).unwrap();
            trans.append(k, v, p).unwrap();
        }
        // buffer [1, 1.5, 2, 2.5, 3, 3.5] read as [2, 3] then viewed [3, 2]
        assert_eq!(canon.keys(DType::F64Sim).data(), &[1.0, 1.5, 2.0, 2.5, 3.0, 3.5]);
        assert_eq!(trans.keys(DType::F64Sim).data(), &[1.0, 2.5, 1.5, 3.0, 2.0, 3.5]);
        // single-column values are unaffected
        assert_eq!(canon.values(DType::F64Sim), trans.values(DType::F64Sim));
    }

    proptest! {
        #[test]
        fn append_preserves_prefix(xs in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let mut c = KvCache::new(1, 2, 1, CacheLayout::Canonical);
            for (p, &x) in xs.iter().enumerate() {
                let before = c.entries().to_vec();
                let (k, v) = entry(x);
                c.append(k, v, p).unwrap();
                prop_assert_eq!(&c.entries()[..p], &before[..]);
                prop_assert_eq!(c.position_ids(), (0..=p).collect::<Vec<_>>());
            }
        }
    }
}
