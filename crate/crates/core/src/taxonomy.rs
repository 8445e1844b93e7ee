//! Fault taxonomy for attention-based networks: seven categories, their 25
//! root causes, and the symptom vocabulary used by detectors.
//!
//! Identifiers are lowercase snake-case and are written byte-exactly into
//! traces, labels and reports.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const TAXONOMY_SCHEMA: &str = "taxonomy_v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown root cause `{0}`")]
    UnknownRootCause(String),
    #[error("unknown fault category `{0}`")]
    UnknownCategory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCategory {
    Masking,
    QkvMultiHead,
    KernelSelection,
    ScoreComputation,
    PositionalEncoding,
    KvCache,
    VariantSelection,
}

impl FaultCategory {
    pub const ALL: [FaultCategory; 7] = [
        FaultCategory::Masking,
        FaultCategory::QkvMultiHead,
        FaultCategory::KernelSelection,
        FaultCategory::ScoreComputation,
        FaultCategory::PositionalEncoding,
        FaultCategory::KvCache,
        FaultCategory::VariantSelection,
    ];

    pub fn id(self) -> &'static str {
        match self {
            FaultCategory::Masking => "masking",
            FaultCategory::QkvMultiHead => "qkv_multi_head",
            FaultCategory::KernelSelection => "kernel_selection",
            FaultCategory::ScoreComputation => "score_computation",
            FaultCategory::PositionalEncoding => "positional_encoding",
            FaultCategory::KvCache => "kv_cache",
            FaultCategory::VariantSelection => "variant_selection",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            FaultCategory::Masking => "Attention Masking",
            FaultCategory::QkvMultiHead => "QKV Projection & Multi-Head Handling",
            FaultCategory::KernelSelection => "Attention Kernel Selection & Integration",
            FaultCategory::ScoreComputation => "Attention Score Computation",
            FaultCategory::PositionalEncoding => "Positional Encoding Integration",
            FaultCategory::KvCache => "KV Cache Management",
            FaultCategory::VariantSelection => "Attention Variant Selection",
        }
    }

    /// Share of attention-specific faults observed in the mined dataset.
    /// A fixture; nothing in the toolkit re-derives it.
    pub fn prevalence(self) -> f64 {
        match self {
            FaultCategory::Masking => 0.25,
            FaultCategory::QkvMultiHead => 0.219,
            FaultCategory::KernelSelection => 0.185,
            FaultCategory::ScoreComputation => 0.130,
            FaultCategory::PositionalEncoding => 0.116,
            FaultCategory::KvCache => 0.079,
            FaultCategory::VariantSelection => 0.021,
        }
    }
}

impl fmt::Display for FaultCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for FaultCategory {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FaultCategory::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| TaxonomyError::UnknownCategory(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observability {
    Explicit,
    Silent,
    Latent,
}

impl fmt::Display for Observability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Observability::Explicit => "explicit",
            Observability::Silent => "silent",
            Observability::Latent => "latent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactSurface {
    RuntimeComputation,
    OutputQuality,
    ResourceManagement,
}

macro_rules! root_causes {
    ($( $variant:ident => $id:literal, $cat:ident, $obs:ident, $desc:literal; )*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum RootCause {
            $( $variant, )*
        }

        impl RootCause {
            /// All root causes in declaration order, grouped by category.
            pub const ALL: [RootCause; 25] = [ $( RootCause::$variant, )* ];

            pub fn id(self) -> &'static str {
                match self { $( RootCause::$variant => $id, )* }
            }

            pub fn category(self) -> FaultCategory {
                match self { $( RootCause::$variant => FaultCategory::$cat, )* }
            }

            /// Curated observability class for the injected form of this
            /// root cause. The mined data only reports observability per
            /// symptom, so this assignment is an interpretation.
            pub fn expected_observability(self) -> Observability {
                match self { $( RootCause::$variant => Observability::$obs, )* }
            }

            pub fn description(self) -> &'static str {
                match self { $( RootCause::$variant => $desc, )* }
            }
        }
    };
}

root_causes! {
    MaskGeneration => "mask_generation", Masking, Silent,
        "mask is created wrongly and does not restrict information flow";
    MaskApplication => "mask_application", Masking, Silent,
        "mask applied at the wrong stage, e.g. after the softmax";
    DynamicMaskMismatch => "dynamic_mask_mismatch", Masking, Silent,
        "mask not extended or resynchronised when the sequence grows";
    DimensionMismatch => "dimension_mismatch", QkvMultiHead, Explicit,
        "query/key/value projections or head splits have incompatible widths";
    ParameterInitialization => "parameter_initialization", QkvMultiHead, Silent,
        "projection weights initialised with a degenerate scale";
    HeadInteraction => "head_interaction", QkvMultiHead, Silent,
        "head outputs are mixed instead of kept independent";
    DynamicParameterRegistration => "dynamic_parameter_registration", QkvMultiHead, Silent,
        "a newly added projection is not registered for optimisation and stays frozen";
    MissingScaling => "missing_scaling", ScoreComputation, Silent,
        "scores are not divided by the square root of the key width";
    NormalizationFault => "normalization_fault", ScoreComputation, Silent,
        "dropout applied after normalisation instead of on the attention weights";
    PrecisionFault => "precision_fault", ScoreComputation, Silent,
        "scores downcast to half precision overflow and poison the softmax";
    HardwareIncompat => "hardware_incompat", KernelSelection, Explicit,
        "optimised kernel requested for an unsupported numeric format";
    FeatureConstraint => "feature_constraint", KernelSelection, Explicit,
        "optimised kernel rejects a valid input feature such as an explicit mask";
    SilentFallback => "silent_fallback", KernelSelection, Silent,
        "dispatcher downgrades to a slower kernel without notification";
    KernelPrecision => "kernel_precision", KernelSelection, Silent,
        "kernel rounds intermediate products to a coarse grid";
    KernelMemory => "kernel_memory", KernelSelection, Explicit,
        "kernel working set exceeds available memory";
    IndexingFault => "indexing_fault", PositionalEncoding, Silent,
        "position indices computed off by one";
    InterpolationFault => "interpolation_fault", PositionalEncoding, Explicit,
        "lookup beyond the trained position table without clamping or interpolation";
    RelativeMismatch => "relative_mismatch", PositionalEncoding, Silent,
        "relative position bucket offset is wrong";
    CacheInvalidation => "cache_invalidation", KvCache, Silent,
        "stale cached keys and values survive a weight change";
    MemoryLayout => "memory_layout", KvCache, Silent,
        "cached tensors read with the wrong layout";
    UpdateSynchronization => "update_synchronization", KvCache, Latent,
        "a read interleaves with a partially applied cache append";
    CachePositionMismatch => "cache_position_mismatch", KvCache, Latent,
        "positions of tokens appended after a cached prefix are not advanced";
    DistributedSync => "distributed_sync", KvCache, Latent,
        "cache replicas on different devices drift out of sync";
    DynamicDispatch => "dynamic_dispatch", VariantSelection, Silent,
        "runtime variant selection picks an implementation unsuited to the input";
    VariantConfiguration => "variant_configuration", VariantSelection, Silent,
        "variant parameters silently disable an algorithmic feature";
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for RootCause {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RootCause::ALL
            .into_iter()
            .find(|r| r.id() == s)
            .ok_or_else(|| TaxonomyError::UnknownRootCause(s.to_string()))
    }
}

/// Root causes of `category` in declaration order.
pub fn list_root_causes(category: FaultCategory) -> Vec<RootCause> {
    RootCause::ALL
        .into_iter()
        .filter(|r| r.category() == category)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symptom {
    ShapeDimensionError,
    KernelCompatibilityError,
    IndexOutOfRange,
    CacheStateError,
    OutOfMemory,
    NumericalInstability,
    SilentPerformanceRegression,
    FrozenParameters,
    AttentionDistributionAnomaly,
    ContextBleeding,
    PositionalDegradation,
    OutputDivergence,
    PostQuantizationAccuracyRegression,
    NodeOutputMismatch,
    NonDeterministicGeneration,
    ProgressiveOutputDegradation,
}

impl Symptom {
    pub const ALL: [Symptom; 16] = [
        Symptom::ShapeDimensionError,
        Symptom::KernelCompatibilityError,
        Symptom::IndexOutOfRange,
        Symptom::CacheStateError,
        Symptom::OutOfMemory,
        Symptom::NumericalInstability,
        Symptom::SilentPerformanceRegression,
        Symptom::FrozenParameters,
        Symptom::AttentionDistributionAnomaly,
        Symptom::ContextBleeding,
        Symptom::PositionalDegradation,
        Symptom::OutputDivergence,
        Symptom::PostQuantizationAccuracyRegression,
        Symptom::NodeOutputMismatch,
        Symptom::NonDeterministicGeneration,
        Symptom::ProgressiveOutputDegradation,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Symptom::ShapeDimensionError => "shape_dimension_error",
            Symptom::KernelCompatibilityError => "kernel_compatibility_error",
            Symptom::IndexOutOfRange => "index_out_of_range",
            Symptom::CacheStateError => "cache_state_error",
            Symptom::OutOfMemory => "out_of_memory",
            Symptom::NumericalInstability => "numerical_instability",
            Symptom::SilentPerformanceRegression => "silent_performance_regression",
            Symptom::FrozenParameters => "frozen_parameters",
            Symptom::AttentionDistributionAnomaly => "attention_distribution_anomaly",
            Symptom::ContextBleeding => "context_bleeding",
            Symptom::PositionalDegradation => "positional_degradation",
            Symptom::OutputDivergence => "output_divergence",
            Symptom::PostQuantizationAccuracyRegression => "post_quantization_accuracy_regression",
            Symptom::NodeOutputMismatch => "node_output_mismatch",
            Symptom::NonDeterministicGeneration => "non_deterministic_generation",
            Symptom::ProgressiveOutputDegradation => "progressive_output_degradation",
        }
    }

    pub fn observability(self) -> Observability {
        use Symptom::*;
        match self {
            ShapeDimensionError | KernelCompatibilityError | IndexOutOfRange | CacheStateError
            | OutOfMemory | NumericalInstability => Observability::Explicit,
            SilentPerformanceRegression
            | FrozenParameters
            | AttentionDistributionAnomaly
            | ContextBleeding
            | PositionalDegradation
            | OutputDivergence
            | PostQuantizationAccuracyRegression => Observability::Silent,
            NodeOutputMismatch | NonDeterministicGeneration | ProgressiveOutputDegradation => {
                Observability::Latent
            }
        }
    }

    pub fn impact_surface(self) -> ImpactSurface {
        use Symptom::*;
        match self {
            ShapeDimensionError | KernelCompatibilityError | IndexOutOfRange | CacheStateError
            | NumericalInstability | FrozenParameters => ImpactSurface::RuntimeComputation,
            AttentionDistributionAnomaly
            | ContextBleeding
            | PositionalDegradation
            | OutputDivergence
            | ProgressiveOutputDegradation => ImpactSurface::OutputQuality,
            OutOfMemory
            | SilentPerformanceRegression
            | PostQuantizationAccuracyRegression
            | NodeOutputMismatch
            | NonDeterministicGeneration => ImpactSurface::ResourceManagement,
        }
    }
}

impl fmt::Display for Symptom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// The four diagnostic rules. Each predicts exactly one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    H1,
    H2,
    H3,
    H4,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [Heuristic::H1, Heuristic::H2, Heuristic::H3, Heuristic::H4];

    pub fn category(self) -> FaultCategory {
        match self {
            Heuristic::H1 => FaultCategory::QkvMultiHead,
            Heuristic::H2 | Heuristic::H3 => FaultCategory::Masking,
            Heuristic::H4 => FaultCategory::KernelSelection,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Heuristic::H1 => "h1",
            Heuristic::H2 => "h2",
            Heuristic::H3 => "h3",
            Heuristic::H4 => "h4",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Ground truth attached to an injected run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultLabel {
    pub category: FaultCategory,
    pub root_cause: RootCause,
}

impl FaultLabel {
    pub fn of(root_cause: RootCause) -> Self {
        FaultLabel {
            category: root_cause.category(),
            root_cause,
        }
    }
}

pub fn validate_label(label: &FaultLabel) -> bool {
    label.root_cause.category() == label.category
}

/// Fraction of labels per category. Every category appears in the map.
pub fn category_distribution(
    labels: &[FaultLabel],
) -> Result<BTreeMap<FaultCategory, f64>, TaxonomyError> {
    if labels.is_empty() {
        return Err(TaxonomyError::EmptyCorpus);
    }
    let mut counts: BTreeMap<FaultCategory, usize> =
        FaultCategory::ALL.into_iter().map(|c| (c, 0)).collect();
    for l in labels {
        *counts.entry(l.category).or_default() += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|(c, k)| (c, k as f64 / n)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyDocument {
    pub schema: String,
    pub categories: Vec<CategoryEntry>,
    pub symptoms: Vec<SymptomEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: FaultCategory,
    pub display_name: String,
    pub prevalence: f64,
    pub root_causes: Vec<RootCauseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootCauseEntry {
    pub id: RootCause,
    pub expected_observability: Observability,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomEntry {
    pub id: Symptom,
    pub observability: Observability,
    pub impact_surface: ImpactSurface,
}

pub fn taxonomy_document() -> TaxonomyDocument {
    TaxonomyDocument {
        schema: TAXONOMY_SCHEMA.to_string(),
        categories: FaultCategory::ALL
            .into_iter()
            .map(|c| CategoryEntry {
                id: c,
                display_name: c.display_name().to_string(),
                prevalence: c.prevalence(),
                root_causes: list_root_causes(c)
                    .into_iter()
                    .map(|r| RootCauseEntry {
                        id: r,
                        expected_observability: r.expected_observability(),
                        description: r.description().to_string(),
                    })
                    .collect(),
            })
            .collect(),
        symptoms: Symptom::ALL
            .into_iter()
            .map(|s| SymptomEntry {
                id: s,
                observability: s.observability(),
                impact_surface: s.impact_surface(),
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn seven_categories_with_fixture_prevalence() {
        let p: Vec<f64> = FaultCategory::ALL.iter().map(|c| c.prevalence()).collect();
        assert_eq!(p, vec![0.25, 0.219, 0.185, 0.130, 0.116, 0.079, 0.021]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn partition_sizes() {
        let sizes: Vec<(FaultCategory, usize)> = FaultCategory::ALL
            .iter()
            .map(|&c| (c, list_root_causes(c).len()))
            .collect();
        use FaultCategory::*;
        assert_eq!(
            sizes,
            vec![
                (Masking, 3),
                (QkvMultiHead, 4),
                (KernelSelection, 5),
                (ScoreComputation, 3),
                (PositionalEncoding, 3),
                (KvCache, 5),
                (VariantSelection, 2),
            ]
        );
        assert_eq!(RootCause::ALL.len(), 25);
        let ids: BTreeSet<&str> = RootCause::ALL.iter().map(|r| r.id()).collect();
        assert_eq!(ids.len(), 25);
    }

    #[test]
    fn list_examples() {
        let ids = |c| list_root_causes(c).into_iter().map(|r| r.id()).collect::<Vec<_>>();
        assert_eq!(
            ids(FaultCategory::Masking),
            vec!["mask_generation", "mask_application", "dynamic_mask_mismatch"]
        );
        assert_eq!(
            ids(FaultCategory::VariantSelection),
            vec!["dynamic_dispatch", "variant_configuration"]
        );
        assert_eq!(list_root_causes(FaultCategory::KvCache).len(), 5);
    }

    #[test]
    fn label_validation() {
        let ok = FaultLabel {
            category: FaultCategory::Masking,
            root_cause: RootCause::MaskGeneration,
        };
        let cross = FaultLabel {
            category: FaultCategory::Masking,
            root_cause: RootCause::DimensionMismatch,
        };
        let kv = FaultLabel {
            category: FaultCategory::KvCache,
            root_cause: RootCause::CachePositionMismatch,
        };
        assert!(validate_label(&ok));
        assert!(!validate_label(&cross));
        assert!(validate_label(&kv));
    }

    #[test]
    fn distribution_examples() {
        let all_mask = vec![FaultLabel::of(RootCause::MaskGeneration); 4];
        let d = category_distribution(&all_mask).unwrap();
        assert_eq!(d[&FaultCategory::Masking], 1.0);
        assert_eq!(d[&FaultCategory::KvCache], 0.0);
        assert_eq!(d.len(), 7);

        let mut labels = vec![FaultLabel::of(RootCause::MaskApplication); 73];
        labels.extend(vec![FaultLabel::of(RootCause::HeadInteraction); 64]);
        labels.extend(vec![FaultLabel::of(RootCause::KernelMemory); 155]);
        let d = category_distribution(&labels).unwrap();
        assert!((d[&FaultCategory::Masking] - 0.25).abs() <= 1e-3);
        assert!((d[&FaultCategory::QkvMultiHead] - 0.219).abs() <= 1e-3);
        assert!((d.values().sum::<f64>() - 1.0).abs() <= 1e-9);

        assert_eq!(category_distribution(&[]), Err(TaxonomyError::EmptyCorpus));
    }

    #[test]
    fn observability_fixture_snapshot() {
        let snapshot: Vec<String> = RootCause::ALL
            .iter()
            .map(|r| format!("{}={}", r.id(), r.expected_observability()))
            .collect();
        assert_eq!(
            snapshot.join(","),
            "mask_generation=silent,mask_application=silent,dynamic_mask_mismatch=silent,\
dimension_mismatch=explicit,parameter_initialization=silent,head_interaction=silent,\
dynamic_parameter_registration=silent,missing_scaling=silent,normalization_fault=silent,\
precision_fault=silent,hardware_incompat=explicit,feature_constraint=explicit,\
silent_fallback=silent,kernel_precision=silent,kernel_memory=explicit,indexing_fault=silent,\
interpolation_fault=explicit,relative_mismatch=silent,cache_invalidation=silent,\
memory_layout=silent,update_synchronization=latent,cache_position_mismatch=latent,\
distributed_sync=latent,dynamic_dispatch=silent,variant_configuration=silent"
        );
    }

    #[test]
    fn ids_round_trip_through_from_str() {
        for r in RootCause::ALL {
            assert_eq!(r.id().parse::<RootCause>().unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.id()));
        }
        for c in FaultCategory::ALL {
            assert_eq!(c.id().parse::<FaultCategory>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{}\"", c.id()));
        }
        for s in Symptom::ALL {
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.id()));
        }
        assert!("bogus".parse::<RootCause>().is_err());
    }

    #[test]
    fn document_lists_everything() {
        let doc = taxonomy_document();
        assert_eq!(doc.categories.len(), 7);
        let n: usize = doc.categories.iter().map(|c| c.root_causes.len()).sum();
        assert_eq!(n, 25);
        let json = serde_json::to_string(&doc).unwrap();
        let back: TaxonomyDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
    }
}
