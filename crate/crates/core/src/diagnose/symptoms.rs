use serde_json::json;

use super::Finding;
use crate::engine::{abs_diff, RunTrace, Tensor};
use crate::kernels::{DispatchReason, PrecisionProfile};
use crate::taxonomy::Symptom;

/// Output difference that counts as divergence.
pub const DIVERGENCE_TOL: f64 = 1e-6;
/// Cost ratio against the oracle that counts as a regression.
pub const COST_REGRESSION: f64 = 1.5;
/// Mean-entropy shift against the oracle that counts as an anomaly.
pub const ENTROPY_SHIFT: f64 = 0.02;
/// Padded-key mass above this is context bleeding.
const BLEED_TOL: f64 = 1e-12;

fn symptom_for_error(kind: &str) -> Symptom {
    match kind {
        "kernel_reject" => Symptom::KernelCompatibilityError,
        "position_out_of_range" => Symptom::IndexOutOfRange,
        "position_gap" | "cache_state" => Symptom::CacheStateError,
        "out_of_memory" => Symptom::OutOfMemory,
        "not_row_stochastic" => Symptom::NumericalInstability,
        _ => Symptom::ShapeDimensionError,
    }
}

/// Largest output difference per sequence position, for `[B, L, d]` outputs
/// of equal shape.
pub fn position_errors(a: &Tensor, b: &Tensor) -> Option<Vec<f64>> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return None;
    }
    let (bs, l, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut errs = vec![0.0f64; l];
    for bb in 0..bs {
        for (t, e) in errs.iter_mut().enumerate() {
            let off = (bb * l + t) * d;
            for c in off..off + d {
                *e = e.max(abs_diff(a.data()[c], b.data()[c]));
            }
        }
    }
    Some(errs)
}

/// First step at which `trace` departs from `oracle`. Decode runs report
/// the first diverging token position, single passes report 0. Replica
/// drift recorded in cache events counts as divergence too.
pub fn first_divergence(trace: &RunTrace, oracle: Option<&RunTrace>) -> Option<usize> {
    let replica = trace
        .cache_events
        .iter()
        .find(|e| e.divergence.is_some_and(|d| d > 0))
        .map(|e| e.step);
    let output = oracle.and_then(|o| match (&trace.output, &o.output) {
        (Some(a), Some(b)) => match position_errors(a, b) {
            Some(errs) => {
                let first = errs.iter().position(|&e| e > DIVERGENCE_TOL)?;
                Some(if trace.cache_events.is_empty() { 0 } else { first })
            }
            None => Some(0),
        },
        _ => None,
    });
    match (replica, output) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

fn mean_entropy(trace: &RunTrace) -> Option<f64> {
    let v: Vec<f64> = trace.weight_stats().filter_map(|w| w.entropy_mean).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Non-heuristic findings, in a fixed order. Oracle-relative symptoms need
/// `oracle`.
pub fn detect_symptoms(trace: &RunTrace, oracle: Option<&RunTrace>, latent_horizon: usize) -> Vec<Finding> {
    let mut out = Vec::new();

    if let Some(e) = &trace.raised_error {
        out.push(Finding::symptom(
            symptom_for_error(&e.kind),
            json!({"kind": e.kind, "message": e.message, "stage": e.stage}),
        ));
    }

    let fallbacks: Vec<_> = trace
        .dispatch_events
        .iter()
        .filter(|e| e.reason == DispatchReason::SilentFallback)
        .collect();
    if let Some(e) = fallbacks.first() {
        out.push(Finding::symptom(
            Symptom::SilentPerformanceRegression,
            json!({"requested": e.requested, "selected": e.selected, "cost_incurred": e.cost_incurred}),
        ));
    } else if let Some(o) = oracle {
        if o.wall_cost > 0.0 && trace.wall_cost > COST_REGRESSION * o.wall_cost {
            out.push(Finding::symptom(
                Symptom::SilentPerformanceRegression,
                json!({"cost": trace.wall_cost, "oracle_cost": o.wall_cost}),
            ));
        }
    }

    let non_finite: Vec<String> = trace
        .stages
        .iter()
        .flat_map(|s| s.tensors.iter().map(move |t| (s.stage, t)))
        .filter(|(_, t)| t.non_finite() > 0)
        .map(|(stage, t)| format!("{}/{}", stage.id(), t.name))
        .collect();
    if !non_finite.is_empty() {
        out.push(Finding::symptom(Symptom::NumericalInstability, json!({"tensors": non_finite})));
    }

    let frozen: Vec<&String> = trace.probe_results.iter().filter(|(_, &m)| !m).map(|(k, _)| k).collect();
    if !frozen.is_empty() {
        out.push(Finding::symptom(Symptom::FrozenParameters, json!({"parameters": frozen})));
    }

    if let Some(e) = trace.cache_events.iter().find(|e| e.divergence.is_some_and(|d| d > 0)) {
        out.push(Finding::symptom(
            Symptom::NodeOutputMismatch,
            json!({"step": e.step, "differing_entries": e.divergence}),
        ));
    }

    let bleed = trace.weight_stats().map(|w| w.padded_mass).fold(0.0, f64::max);
    if bleed > BLEED_TOL {
        out.push(Finding::symptom(Symptom::ContextBleeding, json!({"padded_mass": bleed})));
    }

    let Some(o) = oracle else {
        return out;
    };

    if let (Some(a), Some(b)) = (mean_entropy(trace), mean_entropy(o)) {
        if (a - b).abs() > ENTROPY_SHIFT {
            out.push(Finding::symptom(
                Symptom::AttentionDistributionAnomaly,
                json!({"entropy": a, "oracle_entropy": b}),
            ));
        }
    }

    let (Some(y), Some(y0)) = (&trace.output, &o.output) else {
        return out;
    };
    let Some(errs) = position_errors(y, y0) else {
        out.push(Finding::symptom(
            Symptom::OutputDivergence,
            json!({"shape": y.shape(), "oracle_shape": y0.shape()}),
        ));
        return out;
    };
    let max = errs.iter().copied().fold(0.0, f64::max);
    if max <= DIVERGENCE_TOL {
        return out;
    }

    let half = errs.len() / 2;
    if half >= 2 {
        let early = errs[..half].iter().sum::<f64>() / half as f64;
        let late = errs[half..].iter().sum::<f64>() / (errs.len() - half) as f64;
        if late > 2.0 * early {
            out.push(Finding::symptom(
                Symptom::PositionalDegradation,
                json!({"early_error": early, "late_error": late}),
            ));
        }
    }

    if trace.kernel.as_ref().is_some_and(|k| k.precision_profile == PrecisionProfile::RoundedIntermediate) {
        out.push(Finding::symptom(Symptom::PostQuantizationAccuracyRegression, json!({"max_error": max})));
    }

    let step = first_divergence(trace, oracle).unwrap_or(0);
    let symptom = if step >= latent_horizon {
        Symptom::ProgressiveOutputDegradation
    } else {
        Symptom::OutputDivergence
    };
    out.push(Finding::symptom(symptom, json!({"max_error": max, "first_step": step})));
    out
}
