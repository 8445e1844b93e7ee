use serde_json::{json, Map, Value};

use super::{DiagnoseError, Finding};
use crate::engine::{broadcast_shape, RunTrace, Stage, Tensor, NEG_MASK};
use crate::kernels::kernel_memory_required;
use crate::taxonomy::{Heuristic, Observability};

/// Entropy below this marks collapsed attention.
pub const ENTROPY_FLOOR: f64 = 0.1;

fn severity(trace: &RunTrace) -> Observability {
    if trace.raised_error.is_some() {
        Observability::Explicit
    } else {
        Observability::Silent
    }
}

fn finding(trace: &RunTrace, h: Heuristic, evidence: Map<String, Value>) -> Option<Finding> {
    (!evidence.is_empty()).then(|| Finding::heuristic(h, Value::Object(evidence), severity(trace)))
}

fn blocked(v: f64) -> bool {
    v <= NEG_MASK / 2.0
}

/// Mask value at `(b, i, j)` after broadcasting against `[B, 1, L, L]`.
fn mask_at(m: &Tensor, strides: &[usize], b: usize, i: usize, j: usize) -> f64 {
    let shape = m.shape();
    let r = shape.len();
    let mut off = 0;
    for (k, (&d, &s)) in shape.iter().zip(strides).enumerate() {
        let from_end = r - 1 - k;
        let idx = match from_end {
            0 => j,
            1 => i,
            3 => b,
            _ => 0,
        };
        if d > 1 {
            off += idx.min(d - 1) * s;
        }
    }
    m.data()[off]
}

/// Q/K/V widths, head layout, dtypes and finiteness.
pub fn detect_h1(trace: &RunTrace) -> Result<Option<Finding>, DiagnoseError> {
    let c = &trace.config;
    let mut ev = Map::new();
    if c.d_q != c.d_k {
        ev.insert("d_q".into(), json!(c.d_q));
        ev.insert("d_k".into(), json!(c.d_k));
    }
    if c.d_model != c.n_heads * c.d_head {
        ev.insert("d_model".into(), json!(c.d_model));
        ev.insert("n_heads".into(), json!(c.n_heads));
        ev.insert("d_head".into(), json!(c.d_head));
    }
    let q = trace.summary(Stage::Project, "q");
    let k = trace.summary(Stage::Project, "k");
    let v = trace.summary(Stage::Project, "v");
    match (q, k, v) {
        (Some(q), Some(k), Some(v)) => {
            if q.dtype != k.dtype || k.dtype != v.dtype {
                ev.insert("dtypes".into(), json!([q.dtype, k.dtype, v.dtype]));
            }
            let bad: Vec<&str> = [q, k, v]
                .iter()
                .filter(|s| s.non_finite() > 0)
                .map(|s| s.name.as_str())
                .collect();
            if !bad.is_empty() {
                ev.insert("non_finite".into(), json!(bad));
            }
        }
        _ if ev.is_empty() => return Err(DiagnoseError::MissingStage("project")),
        _ => {}
    }
    Ok(finding(trace, Heuristic::H1, ev))
}

/// Collapsed entropy, causal leaks, out-of-range positions, non-stochastic rows.
pub fn detect_h2(trace: &RunTrace) -> Result<Option<Finding>, DiagnoseError> {
    let stats: Vec<_> = trace.weight_stats().collect();
    let has_mask = trace.mask_snapshot.is_some() && trace.config.mask_mode.causal();
    if stats.is_empty() && !has_mask && trace.position_indices.is_empty() {
        return Err(DiagnoseError::MissingStage("softmax"));
    }
    let mut ev = Map::new();

    let entropies: Vec<f64> = stats.iter().filter_map(|s| s.entropy_mean).collect();
    if !entropies.is_empty() {
        let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
        if mean < ENTROPY_FLOOR {
            ev.insert("entropy".into(), json!(mean));
        }
    }

    if let (Some(m), true) = (&trace.mask_snapshot, has_mask) {
        if m.rank() >= 2 {
            let (li, lj) = (m.shape()[m.rank() - 2], m.shape()[m.rank() - 1]);
            let strides = m.strides();
            let batches = if m.rank() >= 4 { m.shape()[0] } else { 1 };
            'scan: for b in 0..batches {
                for i in 0..li {
                    for j in i + 1..lj {
                        if !blocked(mask_at(m, &strides, b, i, j)) {
                            ev.insert("unblocked_future".into(), json!([i, j]));
                            break 'scan;
                        }
                    }
                }
            }
        }
    }

    if let (Some(limit), Some(&max)) = (trace.position_limit, trace.position_indices.iter().max()) {
        if max >= limit {
            ev.insert("max_index".into(), json!(max));
            ev.insert("index_limit".into(), json!(limit));
        }
    }

    let tol = trace.config.dtype.row_sum_tolerance();
    let worst = stats
        .iter()
        .flat_map(|s| s.row_sums.iter().copied())
        .filter(|s| s.is_finite())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    if worst > tol {
        ev.insert("row_sum_error".into(), json!(worst));
    }
    Ok(finding(trace, Heuristic::H2, ev))
}

/// Mask shape, mask finiteness and padding coverage.
pub fn detect_h3(trace: &RunTrace) -> Result<Option<Finding>, DiagnoseError> {
    let m = trace
        .mask_snapshot
        .as_ref()
        .ok_or(DiagnoseError::MissingStage("mask"))?;
    let s = trace
        .summary(Stage::Scores, "scores")
        .ok_or(DiagnoseError::MissingStage("scores"))?;
    let mut ev = Map::new();
    let compatible = broadcast_shape(m.shape(), &s.shape).is_some_and(|out| out == s.shape);
    if !compatible {
        ev.insert("mask_shape".into(), json!(m.shape()));
        ev.insert("score_shape".into(), json!(s.shape));
    }
    let bad = m.data().iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        ev.insert("non_finite".into(), json!(bad));
    }
    if let (Some(p), true) = (&trace.padding, compatible && m.rank() >= 2) {
        let c = &trace.config;
        let l = c.seq_len;
        let strides = m.strides();
        'scan: for b in 0..c.batch {
            for j in (0..l).filter(|&j| p.get(b * l + j) == Some(&0)) {
                for i in 0..l {
                    if mask_at(m, &strides, b, i, j) != NEG_MASK {
                        ev.insert("unmasked_padding".into(), json!([b, i, j]));
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(finding(trace, Heuristic::H3, ev))
}

/// Sequence length against the kernel limit and working set against memory.
pub fn detect_h4(trace: &RunTrace) -> Result<Option<Finding>, DiagnoseError> {
    let kernel = trace.kernel.as_ref().ok_or(DiagnoseError::MissingStage("kernel"))?;
    let memory = trace.memory.ok_or(DiagnoseError::MissingStage("memory"))?;
    let c = &trace.config;
    let mut ev = Map::new();
    if c.seq_len > kernel.max_seq_len {
        ev.insert("seq_len".into(), json!(c.seq_len));
        ev.insert("max_seq_len".into(), json!(kernel.max_seq_len));
    }
    let required = kernel_memory_required(c.batch as u64, c.seq_len as u64, c.d_head as u64).unwrap_or(u64::MAX);
    if required > memory.m_avail {
        ev.insert("required".into(), json!(required));
        ev.insert("available".into(), json!(memory.m_avail));
    }
    Ok(finding(trace, Heuristic::H4, ev))
}
