//! Reference attention engine.

mod config;
pub(crate) mod forward;
pub mod ops;
mod positional;
mod tensor;
mod trace;

pub use config::{
    random_input, AttentionConfig, AttentionWeights, DropoutPlacement, MaskConvention, MaskMode,
    PosEncoding,
};
pub use forward::{
    attention_forward, default_padding, HeadMerge, MaskOverride, Perturbations, RunOptions,
};
pub use ops::{
    aggregate, apply_mask, build_causal_mask, build_padding_mask, combine_masks, merge_heads,
    qkv_project, quantize, row_entropy_normalized, scaled_scores, softmax_rows, split_heads,
    EntropyStats,
};
pub use positional::{
    positional_encode, relative_bucket, sinusoidal_table, PositionalOutput, PositionalParams,
};
pub use tensor::{broadcast_shape, DType, Tensor, NEG_MASK};
pub use trace::{
    ErrorRecord, RunTrace, Stage, StageRecord, TensorSummary, WeightStats, TRACE_SCHEMA,
};

pub(crate) use tensor::abs_diff;

use crate::kernels::Violation;
use crate::kvcache::CacheError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("data length {got} does not match shape volume {expected}")]
    DataLength { expected: usize, got: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("width {dim} is not divisible by {heads} heads")]
    IndivisibleHeads { dim: usize, heads: usize },
    #[error("query width {d_q} does not match key width {d_k}")]
    QkDimMismatch { d_q: usize, d_k: usize },
    #[error("mask shape {mask:?} does not broadcast to scores {scores:?}")]
    BroadcastError { mask: Vec<usize>, scores: Vec<usize> },
    #[error("row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("position {max_index} outside table of size {table_size}")]
    PositionOutOfRange { max_index: usize, table_size: usize },
    #[error("kernel rejected the configuration: {0:?}")]
    KernelReject(Vec<Violation>),
    #[error("unknown kernel `{0}`")]
    UnknownKernel(String),
    #[error("out of memory: {required} elements required, {available} available")]
    OutOfMemory { required: u64, available: u64 },
    #[error("memory requirement overflows")]
    CapacityOverflow,
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl EngineError {
    /// Stable identifier written to traces.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::DataLength { .. } | EngineError::ShapeMismatch { .. } => "shape_mismatch",
            EngineError::IndivisibleHeads { .. } => "indivisible_heads",
            EngineError::QkDimMismatch { .. } => "qk_dim_mismatch",
            EngineError::BroadcastError { .. } => "broadcast_error",
            EngineError::NotRowStochastic { .. } => "not_row_stochastic",
            EngineError::PositionOutOfRange { .. } => "position_out_of_range",
            EngineError::KernelReject(_) | EngineError::UnknownKernel(_) => "kernel_reject",
            EngineError::OutOfMemory { .. } | EngineError::CapacityOverflow => "out_of_memory",
            EngineError::Cache(e) => e.kind(),
            EngineError::InvalidConfig(_) => "invalid_config",
        }
    }
}
