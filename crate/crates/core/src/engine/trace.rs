use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::config::AttentionConfig;
use super::ops::normalized_entropy;
use super::tensor::{DType, Tensor};
use crate::kernels::{DispatchEvent, KernelDescriptor, MemoryModel};
use crate::kvcache::CacheEvent;
use crate::serde_util;

pub const TRACE_SCHEMA: &str = "trace_schema_v1";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Project,
    SplitHeads,
    Scores,
    Mask,
    Softmax,
    Dropout,
    Aggregate,
    MergeHeads,
}

impl Stage {
    pub fn id(self) -> &'static str {
        match self {
            Stage::Project => "project",
            Stage::SplitHeads => "split_heads",
            Stage::Scores => "scores",
            Stage::Mask => "mask",
            Stage::Softmax => "softmax",
            Stage::Dropout => "dropout",
            Stage::Aggregate => "aggregate",
            Stage::MergeHeads => "merge_heads",
        }
    }
}

/// Row statistics of an attention-weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    #[serde(with = "serde_util::vec_real")]
    pub row_sums: Vec<f64>,
    /// Mean normalised entropy over finite, row-stochastic rows of length
    /// two or more; absent when no row qualifies.
    #[serde(with = "serde_util::opt_real")]
    pub entropy_mean: Option<f64>,
    /// Rows that entered `entropy_mean`.
    pub entropy_rows: usize,
    /// Largest weight mass any row puts on padded key positions.
    #[serde(with = "serde_util::real")]
    pub padded_mass: f64,
}

impl WeightStats {
    /// `padding` holds one flag per (batch, key) position when keys map
    /// one-to-one onto input positions.
    pub fn compute(w: &Tensor, padding: Option<&[u8]>) -> Self {
        let n = w.last_dim().max(1);
        let tol = w.dtype().row_sum_tolerance();
        let rows_per_batch = if w.rank() >= 1 && w.shape()[0] > 0 {
            w.len() / n / w.shape()[0]
        } else {
            0
        };
        let mut row_sums = Vec::with_capacity(w.len() / n);
        let (mut h_sum, mut h_rows) = (0.0, 0usize);
        let mut padded_mass: f64 = 0.0;
        for (r, row) in w.data().chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            row_sums.push(sum);
            if n >= 2 && sum.is_finite() && (sum - 1.0).abs() <= tol {
                h_sum += normalized_entropy(row);
                h_rows += 1;
            }
            if let Some(p) = padding {
                let b = r / rows_per_batch.max(1);
                if p.len() >= (b + 1) * n {
                    let flags = &p[b * n..(b + 1) * n];
                    let mass: f64 = row
                        .iter()
                        .zip(flags)
                        .filter(|(_, &f)| f == 0)
                        .map(|(x, _)| x.abs())
                        .sum();
                    if mass.is_finite() {
                        padded_mass = padded_mass.max(mass);
                    }
                }
            }
        }
        WeightStats {
            row_sums,
            entropy_mean: (h_rows > 0).then(|| h_sum / h_rows as f64),
            entropy_rows: h_rows,
            padded_mass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSummary {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub nan_count: usize,
    pub inf_count: usize,
    #[serde(with = "serde_util::opt_real")]
    pub min: Option<f64>,
    #[serde(with = "serde_util::opt_real")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Tensor>,
}

impl TensorSummary {
    pub fn of(name: &str, t: &Tensor, embed: bool) -> Self {
        let mut min: Option<f64> = None;
        let mut max: Option<f64> = None;
        for &x in t.data().iter().filter(|x| !x.is_nan()) {
            min = Some(min.map_or(x, |m| m.min(x)));
            max = Some(max.map_or(x, |m| m.max(x)));
        }
        TensorSummary {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: t.dtype(),
            nan_count: t.nan_count(),
            inf_count: t.inf_count(),
            min,
            max,
            weights: None,
            data: embed.then(|| t.clone()),
        }
    }

    pub fn with_weights(mut self, stats: WeightStats) -> Self {
        self.weights = Some(stats);
        self
    }

    pub fn non_finite(&self) -> usize {
        self.nan_count + self.inf_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Decode step, for incremental runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub tensors: Vec<TensorSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

/// Everything observable about one forward or decoding run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema: String,
    #[serde(default)]
    pub case_id: Option<String>,
    pub config: AttentionConfig,
    pub stages: Vec<StageRecord>,
    #[serde(default)]
    pub mask_snapshot: Option<Tensor>,
    /// Padding flags `[batch * seq_len]` when the run used a padding mask.
    #[serde(default)]
    pub padding: Option<Vec<u8>>,
    pub position_indices: Vec<usize>,
    /// Size of the position table or cache the indices address, if bounded.
    #[serde(default)]
    pub position_limit: Option<usize>,
    #[serde(default)]
    pub kernel: Option<KernelDescriptor>,
    #[serde(default)]
    pub memory: Option<MemoryModel>,
    pub dispatch_events: Vec<DispatchEvent>,
    pub cache_events: Vec<CacheEvent>,
    #[serde(default)]
    pub probe_results: BTreeMap<String, bool>,
    #[serde(default)]
    pub raised_error: Option<ErrorRecord>,
    #[serde(default)]
    pub output: Option<Tensor>,
    #[serde(with = "serde_util::real")]
    pub wall_cost: f64,
}

impl RunTrace {
    pub fn new(config: AttentionConfig) -> Self {
        RunTrace {
            schema: TRACE_SCHEMA.to_string(),
            case_id: None,
            config,
            stages: Vec::new(),
            mask_snapshot: None,
            padding: None,
            position_indices: Vec::new(),
            position_limit: None,
            kernel: None,
            memory: None,
            dispatch_events: Vec::new(),
            cache_events: Vec::new(),
            probe_results: BTreeMap::new(),
            raised_error: None,
            output: None,
            wall_cost: 0.0,
        }
    }

    pub fn record(&mut self, stage: Stage, step: Option<usize>, tensors: Vec<TensorSummary>) {
        self.stages.push(StageRecord {
            stage,
            step,
            tensors,
        });
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    pub fn summary(&self, stage: Stage, name: &str) -> Option<&TensorSummary> {
        self.stages
            .iter()
            .filter(|s| s.stage == stage)
            .flat_map(|s| &s.tensors)
            .find(|t| t.name == name)
    }

    /// All attention-weight statistics recorded in the trace.
    pub fn weight_stats(&self) -> impl Iterator<Item = &WeightStats> {
        self.stages
            .iter()
            .flat_map(|s| &s.tensors)
            .filter_map(|t| t.weights.as_ref())
    }

    /// Stage ids in recorded order, one per record.
    pub fn stage_order(&self) -> Vec<Stage> {
        self.stages.iter().map(|s| s.stage).collect()
    }
}
