//! Rule-based diagnosis of run traces: the four heuristics, symptom
//! detectors and observability classification.

mod heuristics;
mod symptoms;

pub use heuristics::{detect_h1, detect_h2, detect_h3, detect_h4, ENTROPY_FLOOR};
pub use symptoms::{
    detect_symptoms, first_divergence, position_errors, COST_REGRESSION, DIVERGENCE_TOL, ENTROPY_SHIFT,
};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{RunTrace, TRACE_SCHEMA};
use crate::taxonomy::{FaultCategory, Heuristic, Observability, Symptom};

/// Decode steps before which a divergence counts as silent, not latent.
pub const LATENT_HORIZON: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DiagnoseError {
    #[error("trace has no {0} record")]
    MissingStage(&'static str),
    #[error("unsupported trace schema `{found}`, expected `{TRACE_SCHEMA}`")]
    SchemaVersionMismatch { found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub detector: String,
    pub heuristic: Option<Heuristic>,
    pub predicted_category: Option<FaultCategory>,
    pub evidence: Value,
    pub severity_hint: Observability,
}

impl Finding {
    pub fn heuristic(h: Heuristic, evidence: Value, severity_hint: Observability) -> Self {
        Finding {
            detector: h.id().to_string(),
            heuristic: Some(h),
            predicted_category: Some(h.category()),
            evidence,
            severity_hint,
        }
    }

    pub fn symptom(s: Symptom, evidence: Value) -> Self {
        Finding {
            detector: s.id().to_string(),
            heuristic: None,
            predicted_category: None,
            evidence,
            severity_hint: s.observability(),
        }
    }
}

/// Observability class of a diagnosed trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservedClass {
    Explicit,
    Silent,
    Latent,
    Clean,
}

impl ObservedClass {
    pub fn fault_class(self) -> Option<Observability> {
        match self {
            ObservedClass::Explicit => Some(Observability::Explicit),
            ObservedClass::Silent => Some(Observability::Silent),
            ObservedClass::Latent => Some(Observability::Latent),
            ObservedClass::Clean => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub case_id: Option<String>,
    pub observability: ObservedClass,
    pub findings: Vec<Finding>,
    pub undiagnosed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_divergence_step: Option<usize>,
}

impl DiagnosisReport {
    pub fn heuristics(&self) -> impl Iterator<Item = Heuristic> + '_ {
        self.findings.iter().filter_map(|f| f.heuristic)
    }

    pub fn fired(&self, h: Heuristic) -> bool {
        self.heuristics().any(|x| x == h)
    }

    /// Symptom ids among the findings, heuristics excluded.
    pub fn symptoms(&self) -> impl Iterator<Item = &str> + '_ {
        self.findings
            .iter()
            .filter(|f| f.heuristic.is_none())
            .map(|f| f.detector.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagnoseOptions {
    pub latent_horizon: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            latent_horizon: LATENT_HORIZON,
        }
    }
}

pub fn classify_observability(report: &DiagnosisReport, trace: &RunTrace, latent_horizon: usize) -> ObservedClass {
    if trace.raised_error.is_some() {
        ObservedClass::Explicit
    } else if report.first_divergence_step.is_some_and(|s| s >= latent_horizon) {
        ObservedClass::Latent
    } else if !report.findings.is_empty() {
        ObservedClass::Silent
    } else {
        ObservedClass::Clean
    }
}

pub fn diagnose(trace: &RunTrace, oracle: Option<&RunTrace>) -> Result<DiagnosisReport, DiagnoseError> {
    diagnose_with(trace, oracle, &DiagnoseOptions::default())
}

/// Runs H1 to H4, then the symptom detectors. A heuristic whose inputs are
/// absent from the trace is skipped.
pub fn diagnose_with(
    trace: &RunTrace,
    oracle: Option<&RunTrace>,
    opts: &DiagnoseOptions,
) -> Result<DiagnosisReport, DiagnoseError> {
    for t in std::iter::once(trace).chain(oracle) {
        if t.schema != TRACE_SCHEMA {
            return Err(DiagnoseError::SchemaVersionMismatch { found: t.schema.clone() });
        }
    }
    let mut findings = Vec::new();
    for detect in [detect_h1, detect_h2, detect_h3, detect_h4] {
        match detect(trace) {
            Ok(Some(f)) => findings.push(f),
            Ok(None) | Err(DiagnoseError::MissingStage(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let undiagnosed = findings.is_empty();
    findings.extend(detect_symptoms(trace, oracle, opts.latent_horizon));
    let mut report = DiagnosisReport {
        case_id: trace.case_id.clone(),
        observability: ObservedClass::Clean,
        findings,
        undiagnosed,
        first_divergence_step: first_divergence(trace, oracle),
    };
    report.observability = classify_observability(&report, trace, opts.latent_horizon);
    Ok(report)
}
