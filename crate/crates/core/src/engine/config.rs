use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::tensor::{DType, Tensor};
use super::EngineError;
use crate::kernels::DispatchPolicy;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    Causal,
    Padding,
    CausalPlusPadding,
}

impl MaskMode {
    pub fn causal(self) -> bool {
        matches!(self, MaskMode::Causal | MaskMode::CausalPlusPadding)
    }

    pub fn padding(self) -> bool {
        matches!(self, MaskMode::Padding | MaskMode::CausalPlusPadding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskConvention {
    #[default]
    AdditiveNegInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    /// Dropout on the logits. Supported but not used by any scenario.
    BeforeSoftmax,
    AfterSoftmaxPreAggregation,
    /// Faulty: dropout lands on the aggregated head outputs.
    AfterNormalizationFaulty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PosEncoding {
    #[serde(rename = "none")]
    Disabled,
    SinusoidalAbsolute,
    LearnedAbsolute { max_positions: usize },
    RelativeBucketed { num_buckets: usize, max_distance: usize },
}

/// Dimensions and behaviour of one attention run.
///
/// Injectors may build configs that break `is_consistent`; `validate` only
/// rejects configs the engine cannot even attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub batch: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_q: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub scaling_enabled: bool,
    pub mask_mode: MaskMode,
    pub mask_convention: MaskConvention,
    pub dropout_rate: f64,
    pub dropout_placement: DropoutPlacement,
    pub pos_encoding: PosEncoding,
    pub dtype: DType,
    pub kernel: String,
    pub dispatch_policy: DispatchPolicy,
    /// Available kernel memory, in scalar elements.
    pub memory_capacity: u64,
    pub seed: u64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            batch: 2,
            seq_len: 24,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_q: 32,
            d_k: 32,
            d_v: 32,
            scaling_enabled: true,
            mask_mode: MaskMode::Causal,
            mask_convention: MaskConvention::AdditiveNegInf,
            dropout_rate: 0.0,
            dropout_placement: DropoutPlacement::AfterSoftmaxPreAggregation,
            pos_encoding: PosEncoding::SinusoidalAbsolute,
            dtype: DType::F64Sim,
            kernel: crate::kernels::SDPA.to_string(),
            dispatch_policy: DispatchPolicy::StrictFail,
            memory_capacity: 1_000_000_000,
            seed: 0,
        }
    }
}

impl AttentionConfig {
    /// Multi-head config with `d_q = d_k = d_v = d_model = n_heads * d_head`.
    pub fn multi_head(batch: usize, seq_len: usize, n_heads: usize, d_head: usize) -> Self {
        let d = n_heads * d_head;
        AttentionConfig {
            batch,
            seq_len,
            d_model: d,
            n_heads,
            d_head,
            d_q: d,
            d_k: d,
            d_v: d,
            ..AttentionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let dims = [
            ("batch", self.batch),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_q", self.d_q),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EngineError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EngineError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        match self.pos_encoding {
            PosEncoding::LearnedAbsolute { max_positions: 0 } => Err(EngineError::InvalidConfig(
                "max_positions must be positive".into(),
            )),
            PosEncoding::RelativeBucketed {
                num_buckets,
                max_distance,
            } if num_buckets < 2 || max_distance < 1 => Err(EngineError::InvalidConfig(
                "relative encoding needs num_buckets >= 2 and max_distance >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The shape contract a well-formed model satisfies.
    pub fn is_consistent(&self) -> bool {
        self.d_q == self.d_k
            && self.d_model == self.n_heads * self.d_head
            && self.n_heads > 0
            && self.d_q.is_multiple_of(self.n_heads)
            && self.d_v.is_multiple_of(self.n_heads)
    }

    pub fn rng(&self) -> Rng {
        rng::stream(self.seed, "dropout")
    }
}

/// Parameters of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Dynamically added low-rank style delta on the query projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wq_adapter: Option<Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_table: Option<Tensor>,
    /// Per-head bias per relative-position bucket, shape `[n_heads, num_buckets]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_bias: Option<Tensor>,
}

impl AttentionWeights {
    /// Gaussian projections with variance `1 / d_model`, so projected
    /// entries have roughly unit variance for unit-variance inputs.
    pub fn random(config: &AttentionConfig, rng: &mut Rng) -> Self {
        let dm = config.d_model;
        let std = 1.0 / (dm as f64).sqrt();
        let dt = config.dtype;
        let mut proj = |cols: usize| {
            Tensor::from_parts(vec![dm, cols], dt, rng::gaussian_vec(rng, dm * cols, std))
        };
        let wq = proj(config.d_q);
        let wk = proj(config.d_k);
        let wv = proj(config.d_v);
        let pos_table = match config.pos_encoding {
            PosEncoding::LearnedAbsolute { max_positions } => Some(Tensor::from_parts(
                vec![max_positions, dm],
                dt,
                rng::gaussian_vec(rng, max_positions * dm, 0.5),
            )),
            _ => None,
        };
        let rel_bias = match config.pos_encoding {
            PosEncoding::RelativeBucketed { num_buckets, .. } => Some(Tensor::from_parts(
                vec![config.n_heads, num_buckets],
                DType::F64Sim,
                rng::gaussian_vec(rng, config.n_heads * num_buckets, 1.0),
            )),
            _ => None,
        };
        AttentionWeights {
            wq,
            wk,
            wv,
            wq_adapter: None,
            pos_table,
            rel_bias,
        }
    }

    /// Identity projections; requires `d_q = d_k = d_v = d_model`.
    pub fn identity(config: &AttentionConfig) -> Self {
        let eye = Tensor::eye(config.d_model, config.dtype);
        AttentionWeights {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye,
            wq_adapter: None,
            pos_table: None,
            rel_bias: None,
        }
    }

    /// Named view used by the parameter-update probe.
    pub fn to_params(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("wq".to_string(), self.wq.clone());
        m.insert("wk".to_string(), self.wk.clone());
        m.insert("wv".to_string(), self.wv.clone());
        if let Some(t) = &self.wq_adapter {
            m.insert("wq_adapter".to_string(), t.clone());
        }
        if let Some(t) = &self.pos_table {
            m.insert("pos_table".to_string(), t.clone());
        }
        if let Some(t) = &self.rel_bias {
            m.insert("rel_bias".to_string(), t.clone());
        }
        m
    }

    pub fn from_params(mut params: BTreeMap<String, Tensor>) -> Result<Self, EngineError> {
        let mut take = |name: &str| {
            params
                .remove(name)
                .ok_or_else(|| EngineError::InvalidConfig(format!("missing parameter `{name}`")))
        };
        let wq = take("wq")?;
        let wk = take("wk")?;
        let wv = take("wv")?;
        Ok(AttentionWeights {
            wq,
            wk,
            wv,
            wq_adapter: params.remove("wq_adapter"),
            pos_table: params.remove("pos_table"),
            rel_bias: params.remove("rel_bias"),
        })
    }

    /// Query projection including any adapter delta.
    pub fn effective_wq(&self) -> Result<Tensor, EngineError> {
        match &self.wq_adapter {
            None => Ok(self.wq.clone()),
            Some(a) if a.shape() == self.wq.shape() => {
                let data = self.wq.data().iter().zip(a.data()).map(|(x, y)| x + y).collect();
                Ok(Tensor::from_parts(
                    self.wq.shape().to_vec(),
                    self.wq.dtype().promote(a.dtype()),
                    data,
                ))
            }
            Some(a) => Err(EngineError::ShapeMismatch {
                left: self.wq.shape().to_vec(),
                right: a.shape().to_vec(),
            }),
        }
    }
}

/// Unit-variance Gaussian input `[batch, seq_len, d_model]`.
pub fn random_input(config: &AttentionConfig, rng: &mut Rng) -> Tensor {
    let shape = vec![config.batch, config.seq_len, config.d_model];
    let n = shape.iter().product();
    Tensor::from_parts(shape, config.dtype, rng::gaussian_vec(rng, n, 1.0))
}
