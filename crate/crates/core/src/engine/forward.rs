use super::config::{AttentionConfig, AttentionWeights, DropoutPlacement, MaskMode, PosEncoding};
use super::ops;
use super::positional::{positional_encode, PositionalOutput, PositionalParams};
use super::tensor::{DType, Tensor};
use super::trace::{ErrorRecord, RunTrace, Stage, TensorSummary, WeightStats};
use super::EngineError;
use crate::kernels::{self, KernelDescriptor, KernelRegistry, MemoryModel};
use crate::rng::Rng;

/// Replacement for the mask the config would build.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskOverride {
    /// Same shape as the intended mask, every entry zero.
    AllZero,
    /// Mask built for a shorter sequence and zero-extended to the real one.
    Stale { built_for: usize },
    Explicit(Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadMerge {
    #[default]
    Concat,
    /// Every head slot receives the sum over heads.
    Summed,
}

/// Pipeline faults applied by injectors. The default is a clean run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Perturbations {
    pub mask_override: Option<MaskOverride>,
    pub mask_after_softmax: bool,
    /// Format the scores are rounded to before masking.
    pub score_dtype: Option<DType>,
    pub head_merge: HeadMerge,
    /// Added to every position index.
    pub position_offset: usize,
    pub relative_bias_disabled: bool,
    /// Added to every relative bucket id (clamped to the last bucket).
    pub bucket_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub registry: KernelRegistry,
    /// One flag per (batch, position); 1 is a token, 0 padding. Defaults to
    /// [`default_padding`] when the mask mode needs padding.
    pub padding: Option<Vec<u8>>,
    pub perturb: Perturbations,
    /// Embed full tensors in stage summaries.
    pub embed_tensors: bool,
}

/// Right padding where batch row `b` keeps `L - (b + 1) * L / 8` tokens
/// (at least one).
pub fn default_padding(batch: usize, seq_len: usize) -> Vec<u8> {
    let mut p = Vec::with_capacity(batch * seq_len);
    for b in 0..batch {
        let valid = seq_len.saturating_sub((b + 1) * seq_len / 8).max(1);
        p.extend((0..seq_len).map(|i| u8::from(i < valid)));
    }
    p
}

/// Full-sequence attention. The trace is returned in every case; a failing
/// stage is also recorded in `trace.raised_error`.
pub fn attention_forward(
    config: &AttentionConfig,
    x: &Tensor,
    weights: &AttentionWeights,
    opts: &RunOptions,
    rng: &mut Rng,
) -> (Result<Tensor, EngineError>, RunTrace) {
    let mut run = Run {
        trace: RunTrace::new(config.clone()),
        stage: None,
    };
    let result = run.forward(config, x, weights, opts, rng);
    let mut trace = run.trace;
    if let Err(e) = &result {
        trace.raised_error = Some(ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
            stage: run.stage,
        });
    }
    (result, trace)
}

struct Run {
    trace: RunTrace,
    stage: Option<Stage>,
}

/// Kernel selection plus the memory check shared by forward and decode.
pub(crate) fn select_kernel(
    config: &AttentionConfig,
    registry: &KernelRegistry,
    trace: &mut RunTrace,
) -> Result<KernelDescriptor, EngineError> {
    trace.memory = Some(MemoryModel {
        m_avail: config.memory_capacity,
    });
    let d = kernels::dispatch(config, registry, config.dispatch_policy)?;
    trace.dispatch_events.push(d.event.clone());
    trace.kernel = Some(d.kernel.clone());
    let (kernel, _) = d.into_result()?;
    if let Some(oom) = kernels::simulate_oom(config, trace.memory.as_ref().expect("set above"))? {
        return Err(EngineError::OutOfMemory {
            required: oom.required,
            available: oom.available,
        });
    }
    Ok(kernel)
}

/// Bound on position indices implied by the encoding, if any.
pub(crate) fn position_limit(scheme: PosEncoding) -> Option<usize> {
    match scheme {
        PosEncoding::LearnedAbsolute { max_positions } => Some(max_positions),
        _ => None,
    }
}

/// Absolute embeddings for `positions`, shape `[positions.len(), d_model]`,
/// or `None` for schemes that do not add to the input.
pub(crate) fn absolute_embeddings(
    config: &AttentionConfig,
    weights: &AttentionWeights,
    positions: &[usize],
) -> Result<Option<Tensor>, EngineError> {
    if matches!(config.pos_encoding, PosEncoding::RelativeBucketed { .. }) {
        return Ok(None);
    }
    let params = PositionalParams {
        width: config.d_model,
        table: weights.pos_table.as_ref(),
        interpolate: false,
    };
    match positional_encode(config.pos_encoding, positions, params)? {
        PositionalOutput::Embeddings(t) => Ok(Some(t)),
        _ => Ok(None),
    }
}

/// `x[b, l, :] + pe[l, :]`, rounded to the input format.
pub(crate) fn add_embeddings(x: &Tensor, pe: &Tensor) -> Result<Tensor, EngineError> {
    let (l, d) = (x.shape()[1], x.shape()[2]);
    if pe.shape() != [l, d] {
        return Err(EngineError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: pe.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + pe.data()[i % (l * d)])
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), x.dtype(), data))
}

/// Relative-position bias for query positions `qpos` against key positions
/// `kpos`, as `[n_heads, qpos.len(), kpos.len()]`.
pub(crate) fn relative_bias(
    config: &AttentionConfig,
    weights: &AttentionWeights,
    perturb: &Perturbations,
    qpos: &[usize],
    kpos: &[usize],
) -> Result<Option<Vec<f64>>, EngineError> {
    let PosEncoding::RelativeBucketed {
        num_buckets,
        max_distance,
    } = config.pos_encoding
    else {
        return Ok(None);
    };
    if perturb.relative_bias_disabled {
        return Ok(None);
    }
    let table = weights
        .rel_bias
        .as_ref()
        .ok_or_else(|| EngineError::InvalidConfig("relative encoding needs a bias table".into()))?;
    if table.shape() != [config.n_heads, num_buckets] {
        return Err(EngineError::ShapeMismatch {
            left: table.shape().to_vec(),
            right: vec![config.n_heads, num_buckets],
        });
    }
    let mut out = Vec::with_capacity(config.n_heads * qpos.len() * kpos.len());
    for h in 0..config.n_heads {
        for &i in qpos {
            for &j in kpos {
                let b = super::relative_bucket(i, j, num_buckets, max_distance) + perturb.bucket_offset;
                out.push(table.data()[h * num_buckets + b.min(num_buckets - 1)]);
            }
        }
    }
    Ok(Some(out))
}

/// Adds a `[h, Lq, Lk]` bias to `[B, h, Lq, Lk]` scores.
pub(crate) fn add_head_bias(s: &Tensor, bias: &[f64]) -> Tensor {
    let per_batch = bias.len();
    let data = s
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias[i % per_batch])
        .collect();
    Tensor::from_parts(s.shape().to_vec(), s.dtype(), data)
}

fn build_mask(
    config: &AttentionConfig,
    padding: Option<&[u8]>,
    over: Option<&MaskOverride>,
) -> Result<Option<Tensor>, EngineError> {
    let (b, l) = (config.batch, config.seq_len);
    let intended = match config.mask_mode {
        MaskMode::None => None,
        MaskMode::Causal => Some(ops::build_causal_mask(l)),
        MaskMode::Padding => Some(ops::build_padding_mask(padding.unwrap_or(&[]), b, l)?),
        MaskMode::CausalPlusPadding => Some(ops::combine_masks(
            &ops::build_causal_mask(l),
            &ops::build_padding_mask(padding.unwrap_or(&[]), b, l)?,
        )?),
    };
    Ok(match over {
        None => intended,
        Some(MaskOverride::Explicit(t)) => Some(t.clone()),
        Some(MaskOverride::AllZero) => {
            let shape = intended.map_or_else(|| vec![l, l], |m| m.shape().to_vec());
            Some(Tensor::zeros(shape, DType::F64Sim))
        }
        Some(MaskOverride::Stale { built_for }) => intended.map(|m| {
            let rank = m.rank();
            let mut stale = m.clone();
            let mut idx_data = Vec::with_capacity(m.len());
            super::tensor::for_each_index(m.shape(), |idx| {
                idx_data.push(idx[rank - 2..].iter().any(|&i| i >= *built_for));
            });
            for (v, late) in stale.data_mut().iter_mut().zip(idx_data) {
                if late {
                    *v = 0.0;
                }
            }
            stale
        }),
    })
}

impl Run {
    fn enter(&mut self, stage: Stage) {
        self.stage = Some(stage);
    }

    fn forward(
        &mut self,
        config: &AttentionConfig,
        x: &Tensor,
        weights: &AttentionWeights,
        opts: &RunOptions,
        rng: &mut Rng,
    ) -> Result<Tensor, EngineError> {
        config.validate()?;
        let embed = opts.embed_tensors;
        let p = &opts.perturb;
        let (b, l) = (config.batch, config.seq_len);
        if x.shape() != [b, l, config.d_model] {
            return Err(EngineError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: vec![b, l, config.d_model],
            });
        }

        let kernel = select_kernel(config, &opts.registry, &mut self.trace)?;
        let acc = kernel.accumulate();

        let positions: Vec<usize> = (0..l).map(|i| i + p.position_offset).collect();
        self.trace.position_indices = positions.clone();
        self.trace.position_limit = position_limit(config.pos_encoding);
        let x = match absolute_embeddings(config, weights, &positions)? {
            Some(pe) => add_embeddings(x, &pe)?,
            None => x.clone(),
        };

        self.enter(Stage::Project);
        let wq = weights.effective_wq()?;
        let (q, k, v) = ops::qkv_project(&x, &wq, &weights.wk, &weights.wv)?;
        self.trace.record(
            Stage::Project,
            None,
            vec![
                TensorSummary::of("q", &q, embed),
                TensorSummary::of("k", &k, embed),
                TensorSummary::of("v", &v, embed),
            ],
        );
        if q.last_dim() != k.last_dim() {
            self.enter(Stage::Scores);
            return Err(EngineError::QkDimMismatch {
                d_q: q.last_dim(),
                d_k: k.last_dim(),
            });
        }

        self.enter(Stage::SplitHeads);
        let q = ops::split_heads(&q, config.n_heads)?;
        let k = ops::split_heads(&k, config.n_heads)?;
        let v = ops::split_heads(&v, config.n_heads)?;
        self.trace.record(
            Stage::SplitHeads,
            None,
            vec![
                TensorSummary::of("q", &q, embed),
                TensorSummary::of("k", &k, embed),
                TensorSummary::of("v", &v, embed),
            ],
        );

        self.enter(Stage::Scores);
        let mut s = ops::scores_with(&q, &k, config.scaling_enabled, acc)?;
        if let Some(bias) = relative_bias(config, weights, p, &positions, &positions)? {
            s = add_head_bias(&s, &bias);
        }
        if let Some(dt) = p.score_dtype {
            s = ops::quantize(&s, dt);
        }
        self.trace
            .record(Stage::Scores, None, vec![TensorSummary::of("scores", &s, embed)]);

        self.enter(Stage::Mask);
        let padding = config.mask_mode.padding().then(|| {
            opts.padding
                .clone()
                .unwrap_or_else(|| default_padding(b, l))
        });
        self.trace.padding = padding.clone();
        let mask = build_mask(config, padding.as_deref(), p.mask_override.as_ref())?;
        self.trace.mask_snapshot = mask.clone();
        let mut mask_tensors = Vec::new();
        if let Some(m) = &mask {
            mask_tensors.push(TensorSummary::of("mask", m, embed));
        }
        let pre = match (&mask, p.mask_after_softmax) {
            (Some(m), false) => {
                let masked = ops::apply_mask(&s, m)?;
                mask_tensors.push(TensorSummary::of("masked_scores", &masked, embed));
                masked
            }
            _ => s,
        };
        self.trace.record(Stage::Mask, None, mask_tensors);

        self.enter(Stage::Softmax);
        let pre = if config.dropout_placement == DropoutPlacement::BeforeSoftmax && config.dropout_rate > 0.0 {
            ops::dropout_logits(&pre, config.dropout_rate, rng)
        } else {
            pre
        };
        let mut w = ops::softmax_rows(&pre);
        if let (Some(m), true) = (&mask, p.mask_after_softmax) {
            w = ops::apply_mask(&w, m)?;
        }
        let stats = WeightStats::compute(&w, padding.as_deref());
        self.trace.record(
            Stage::Softmax,
            None,
            vec![TensorSummary::of("weights", &w, embed).with_weights(stats)],
        );

        let rate = config.dropout_rate;
        if rate > 0.0 && config.dropout_placement == DropoutPlacement::AfterSoftmaxPreAggregation {
            self.enter(Stage::Dropout);
            w = ops::dropout(&w, rate, rng);
            self.trace
                .record(Stage::Dropout, None, vec![TensorSummary::of("weights", &w, embed)]);
        }

        self.enter(Stage::Aggregate);
        let mut ctx = ops::aggregate_with(&w, &v, acc)?;
        if rate > 0.0 && config.dropout_placement == DropoutPlacement::AfterNormalizationFaulty {
            ctx = ops::dropout(&ctx, rate, rng);
        }
        self.trace
            .record(Stage::Aggregate, None, vec![TensorSummary::of("context", &ctx, embed)]);

        self.enter(Stage::MergeHeads);
        let y = match p.head_merge {
            HeadMerge::Concat => ops::merge_heads(&ctx)?,
            HeadMerge::Summed => ops::merge_heads_summed(&ctx)?,
        };
        self.trace
            .record(Stage::MergeHeads, None, vec![TensorSummary::of("output", &y, embed)]);
        self.trace.output = Some(y.clone());
        self.trace.wall_cost = kernel.cost_multiplier
            * (b * config.n_heads * l * l) as f64
            * config.d_head as f64;
        self.stage = None;
        Ok(y)
    }
}
