//! One deterministic injector per root cause, and stratified corpus
//! generation on top of them.

mod corpus;
mod probe;
mod scenarios;

pub use corpus::{allocate, generate_corpus, Proportions};
pub use probe::{frozen_parameter_probe, UpdateStep};
pub use scenarios::{Scenario, MIN_SEQ_LEN};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::engine::{AttentionConfig, EngineError, RunTrace};
use crate::taxonomy::{FaultLabel, Heuristic, Observability, RootCause, TaxonomyError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InjectError {
    #[error(transparent)]
    UnknownRootCause(#[from] TaxonomyError),
    #[error("base config is not a valid model: {0}")]
    InvalidBase(String),
    #[error("invalid proportions: {0}")]
    InvalidProportions(String),
}

impl From<EngineError> for InjectError {
    fn from(e: EngineError) -> Self {
        InjectError::InvalidBase(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    ConfigDelta,
    WeightDelta,
    ScheduleDelta,
    PipelineReorder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectorSpec {
    pub root_cause: RootCause,
    pub perturbation: Perturbation,
    pub expected_observability: Observability,
    pub expected_heuristic: Option<Heuristic>,
}

fn spec(rc: RootCause) -> InjectorSpec {
    use PerturbationKind::*;
    use RootCause::*;
    let (kind, summary, heuristic) = match rc {
        MaskGeneration => (ConfigDelta, "causal+padding mask replaced by an all-zero mask", Some(Heuristic::H3)),
        MaskApplication => (PipelineReorder, "mask added after the softmax", Some(Heuristic::H2)),
        DynamicMaskMismatch => (ConfigDelta, "mask built for half the sequence, zero-extended", Some(Heuristic::H2)),
        DimensionMismatch => (ConfigDelta, "query width doubled so d_q != d_k", Some(Heuristic::H1)),
        ParameterInitialization => (WeightDelta, "query and key projections initialised to zero", None),
        HeadInteraction => (PipelineReorder, "heads summed instead of concatenated", None),
        DynamicParameterRegistration => (WeightDelta, "zero-initialised query adapter left out of the update", None),
        MissingScaling => (ConfigDelta, "scores not divided by sqrt(d_k)", None),
        NormalizationFault => (PipelineReorder, "dropout moved from the weights to the aggregated output", None),
        PrecisionFault => (ConfigDelta, "scores rounded to f16 with one logit past 65504", None),
        HardwareIncompat => (ConfigDelta, "f32 input sent to an f16/bf16-only kernel, strict dispatch", None),
        FeatureConstraint => (ConfigDelta, "padding mask sent to a mask-free kernel, strict dispatch", None),
        SilentFallback => (ConfigDelta, "unsupported request falls back without a warning", None),
        KernelPrecision => (ConfigDelta, "kernel rounds every multiply-accumulate to f16", None),
        KernelMemory => (ConfigDelta, "memory capacity set to half the score working set", Some(Heuristic::H4)),
        IndexingFault => (ConfigDelta, "positions start at 1", None),
        InterpolationFault => (ConfigDelta, "learned table half the sequence length, no interpolation", None),
        RelativeMismatch => (ConfigDelta, "relative bucket ids shifted by one", None),
        CacheInvalidation => (ScheduleDelta, "weights swapped at step 8 without clearing the cache", None),
        MemoryLayout => (ScheduleDelta, "cache read with a transposed layout", None),
        UpdateSynchronization => (ScheduleDelta, "value write at step 18 lands after the read", None),
        CachePositionMismatch => (ScheduleDelta, "query positions restart after a 16-token prefix", None),
        DistributedSync => (ScheduleDelta, "replica sync skipped from step 16, odd steps read the stale replica", None),
        DynamicDispatch => (ConfigDelta, "variant selector threshold picks the short-sequence kernel", None),
        VariantConfiguration => (ConfigDelta, "relative position bias silently disabled", None),
    };
    InjectorSpec {
        root_cause: rc,
        perturbation: Perturbation {
            kind,
            summary: summary.to_string(),
        },
        expected_observability: rc.expected_observability(),
        expected_heuristic: heuristic,
    }
}

/// The 25 injector specs in root-cause declaration order.
pub fn injector_specs() -> Vec<InjectorSpec> {
    RootCause::ALL.into_iter().map(spec).collect()
}

pub fn injector_spec(rc: RootCause) -> InjectorSpec {
    spec(rc)
}

/// One injected run and its clean counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedCase {
    pub case_id: String,
    pub label: FaultLabel,
    pub seed: u64,
    pub expected_observability: Observability,
    pub expected_heuristic: Option<Heuristic>,
    pub trace: RunTrace,
    pub oracle: RunTrace,
    pub probe_results: BTreeMap<String, bool>,
}

/// Runs the injector for `root_cause` on a copy of `base`.
pub fn inject(root_cause: RootCause, base: &AttentionConfig, seed: u64) -> Result<InjectedCase, InjectError> {
    inject_case(root_cause, base, seed, format!("{}-{seed}", root_cause.id()))
}

/// [`inject`] with the root cause given by id.
pub fn inject_id(root_cause: &str, base: &AttentionConfig, seed: u64) -> Result<InjectedCase, InjectError> {
    inject(root_cause.parse()?, base, seed)
}

/// The `(faulty, clean)` runs behind [`inject`], for callers that want to
/// replay them on other inputs.
pub fn scenarios(root_cause: RootCause, base: &AttentionConfig, seed: u64) -> Result<(Scenario, Scenario), InjectError> {
    base.validate()?;
    if !base.is_consistent() {
        return Err(InjectError::InvalidBase(
            "base needs d_q == d_k and d_model == n_heads * d_head".into(),
        ));
    }
    Ok(scenarios::build(root_cause, base, seed))
}

pub(crate) fn inject_case(
    root_cause: RootCause,
    base: &AttentionConfig,
    seed: u64,
    case_id: String,
) -> Result<InjectedCase, InjectError> {
    let (faulty, clean) = scenarios(root_cause, base, seed)?;
    let mut trace = faulty.run();
    let mut oracle = clean.run();
    trace.case_id = Some(case_id.clone());
    oracle.case_id = Some(case_id.clone());
    let spec = spec(root_cause);
    Ok(InjectedCase {
        case_id,
        label: FaultLabel::of(root_cause),
        seed,
        expected_observability: spec.expected_observability,
        expected_heuristic: spec.expected_heuristic,
        probe_results: trace.probe_results.clone(),
        trace,
        oracle,
    })
}
