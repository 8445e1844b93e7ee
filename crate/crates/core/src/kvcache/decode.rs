use super::replica::{ReplicaPair, ScheduleItem};
use super::{CacheEntry, CacheEvent, CacheLayout, KvCache, Replica};
use crate::engine::forward::{absolute_embeddings, add_embeddings, position_limit, relative_bias, add_head_bias, select_kernel};
use crate::engine::ops;
use crate::engine::{
    AttentionConfig, AttentionWeights, DType, EngineError, ErrorRecord, MaskMode, RunOptions,
    RunTrace, Stage, Tensor, TensorSummary,
};
use crate::rng::Rng;

/// Faults in the decode loop.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DecodeFault {
    #[default]
    None,
    /// Weights change at `at_step`; without `invalidate` the cache keeps
    /// entries computed with the old weights.
    WeightSwap {
        at_step: usize,
        new_weights: Box<AttentionWeights>,
        invalidate: bool,
    },
    /// The value write at `step` lands after that step's read.
    SplitWrite { step: usize },
    /// Query positions restart at zero for tokens after a cached prefix of
    /// length `from`.
    StalePositions { from: usize },
    /// Appends go to replica A; the A→B sync is skipped from `skip_from` on.
    /// Even steps read A, odd steps read B.
    Replicas { skip_from: usize },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeOptions {
    pub layout: CacheLayout,
    pub fault: DecodeFault,
}

/// Token-by-token causal decoding over a KV cache. Output has shape
/// `[B, L, d_v]`; the clean run matches [`crate::engine::attention_forward`].
pub fn incremental_decode(
    config: &AttentionConfig,
    x: &Tensor,
    weights: &AttentionWeights,
    opts: &RunOptions,
    dec: &DecodeOptions,
    rng: &mut Rng,
) -> (Result<Tensor, EngineError>, RunTrace) {
    let mut trace = RunTrace::new(config.clone());
    let result = decode(config, x, weights, opts, dec, rng, &mut trace);
    if let Err(e) = &result {
        trace.raised_error = Some(ErrorRecord {
            kind: e.kind().to_string(),
            message: e.to_string(),
            stage: None,
        });
    }
    (result, trace)
}

struct Step<'a> {
    config: &'a AttentionConfig,
    opts: &'a RunOptions,
}

impl Step<'_> {
    fn query_position(&self, t: usize, fault: &DecodeFault) -> usize {
        match fault {
            DecodeFault::StalePositions { from } if t >= *from => t - from,
            _ => t,
        }
    }

    /// Projections of token `t` at encoding position `pos`, each flattened
    /// to `[B * d]`.
    fn project(
        &self,
        x: &Tensor,
        t: usize,
        pos: usize,
        w: &AttentionWeights,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>), EngineError> {
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut row = Vec::with_capacity(b * d);
        for bi in 0..b {
            let start = (bi * l + t) * d;
            row.extend_from_slice(&x.data()[start..start + d]);
        }
        let mut xt = Tensor::new(vec![b, 1, d], x.dtype(), row)?;
        if let Some(pe) = absolute_embeddings(self.config, w, &[pos])? {
            xt = add_embeddings(&xt, &pe)?;
        }
        let (q, k, v) = ops::qkv_project(&xt, &w.effective_wq()?, &w.wk, &w.wv)?;
        if q.last_dim() != k.last_dim() {
            return Err(EngineError::QkDimMismatch {
                d_q: q.last_dim(),
                d_k: k.last_dim(),
            });
        }
        Ok((q, k.into_data(), v.into_data()))
    }

    fn attend(
        &self,
        q: &Tensor,
        qpos: usize,
        cache: &KvCache,
        w: &AttentionWeights,
        acc: ops::Accumulate,
        value_dtype: DType,
    ) -> Result<Tensor, EngineError> {
        let c = self.config;
        let q = ops::split_heads(q, c.n_heads)?;
        let keys = ops::split_heads(&cache.keys(q.dtype()), c.n_heads)?;
        let values = ops::split_heads(&cache.values(value_dtype), c.n_heads)?;
        let mut s = ops::scores_with(&q, &keys, c.scaling_enabled, acc)?;
        if let Some(bias) = relative_bias(c, w, &self.opts.perturb, &[qpos], &cache.position_ids())? {
            s = add_head_bias(&s, &bias);
        }
        if c.mask_mode != MaskMode::None {
            // Keeps the score format identical to a masked full pass.
            s = ops::quantize(&s, s.dtype().promote(DType::F64Sim));
        }
        let weights = ops::softmax_rows(&s);
        ops::merge_heads(&ops::aggregate_with(&weights, &values, acc)?)
    }
}

fn decode(
    config: &AttentionConfig,
    x: &Tensor,
    weights: &AttentionWeights,
    opts: &RunOptions,
    dec: &DecodeOptions,
    _rng: &mut Rng,
    trace: &mut RunTrace,
) -> Result<Tensor, EngineError> {
    config.validate()?;
    if config.mask_mode != MaskMode::Causal {
        return Err(EngineError::InvalidConfig(
            "incremental decoding needs a causal mask".into(),
        ));
    }
    let (b, l) = (config.batch, config.seq_len);
    if x.shape() != [b, l, config.d_model] {
        return Err(EngineError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: vec![b, l, config.d_model],
        });
    }
    let kernel = select_kernel(config, &opts.registry, trace)?;
    let acc = kernel.accumulate();
    trace.position_limit = position_limit(config.pos_encoding);
    let step = Step { config, opts };

    let value_dtype = weights.wv.dtype();
    let mut cache = KvCache::new(b, config.d_k, config.d_v, dec.layout);
    let mut pair = matches!(dec.fault, DecodeFault::Replicas { .. }).then(|| ReplicaPair::new(cache.clone()));
    let mut out = vec![0.0; b * l * config.d_v];
    let mut cost = 0.0;

    for t in 0..l {
        let w = match &dec.fault {
            DecodeFault::WeightSwap { at_step, new_weights, .. } if t >= *at_step => new_weights.as_ref(),
            _ => weights,
        };
        if let DecodeFault::WeightSwap {
            at_step,
            invalidate: true,
            ..
        } = &dec.fault
        {
            if t == *at_step {
                cache.clear();
                for j in 0..t {
                    let (_, k, v) = step.project(x, j, step.query_position(j, &dec.fault), w)?;
                    cache.append(k, v, j)?;
                }
            }
        }

        let qpos = step.query_position(t, &dec.fault);
        trace.position_indices.push(qpos);
        let (q, k, v) = step.project(x, t, qpos, w)?;
        let split = matches!(dec.fault, DecodeFault::SplitWrite { step } if step == t);
        let mut replica = None;
        let y = if let Some(pair) = pair.as_mut() {
            let DecodeFault::Replicas { skip_from } = dec.fault else {
                unreachable!()
            };
            pair.step(ScheduleItem::AppendA(CacheEntry {
                k,
                v,
                position_id: t,
                complete: true,
            }))?;
            pair.step(if t < skip_from {
                ScheduleItem::SyncAB
            } else {
                ScheduleItem::SkipSyncFaulty
            })?;
            let (read, which) = if t % 2 == 0 {
                (&pair.a, Replica::A)
            } else {
                (&pair.b, Replica::B)
            };
            replica = Some(which);
            step.attend(&q, qpos, read, w, acc, value_dtype)?
        } else if split {
            cache.begin_append(k, &v, t)?;
            let y = step.attend(&q, qpos, &cache, w, acc, value_dtype)?;
            cache.complete_append(v)?;
            y
        } else {
            cache.append(k, v, t)?;
            step.attend(&q, qpos, &cache, w, acc, value_dtype)?
        };

        let shown = pair.as_ref().map_or(&cache, |p| &p.a);
        cost += (b * config.n_heads * shown.len()) as f64 * config.d_head as f64;
        trace.cache_events.push(CacheEvent {
            step: t,
            length: shown.len(),
            position_ids: shown.position_ids(),
            layout: dec.layout,
            replica,
            divergence: pair.as_ref().map(|p| p.divergence()),
        });
        let dv = config.d_v;
        for bi in 0..b {
            out[(bi * l + t) * dv..(bi * l + t + 1) * dv].copy_from_slice(&y.data()[bi * dv..(bi + 1) * dv]);
        }
    }

    let y = Tensor::new(vec![b, l, config.d_v], value_dtype, out)?;
    trace.record(Stage::MergeHeads, None, vec![TensorSummary::of("output", &y, opts.embed_tensors)]);
    trace.output = Some(y.clone());
    trace.wall_cost = kernel.cost_multiplier * cost;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{attention_forward, random_input, PosEncoding};
    use crate::rng;

    fn setup(config: &AttentionConfig, seed: u64) -> (Tensor, AttentionWeights) {
        let mut r = rng::seeded(seed);
        let w = AttentionWeights::random(config, &mut r);
        (random_input(config, &mut r), w)
    }

    fn max_diff(config: &AttentionConfig, x: &Tensor, w: &AttentionWeights, dec: &DecodeOptions) -> f64 {
        let opts = RunOptions::default();
        let (full, _) = attention_forward(config, x, w, &opts, &mut config.rng());
        let (inc, trace) = incremental_decode(config, x, w, &opts, dec, &mut config.rng());
        assert!(trace.raised_error.is_none(), "{:?}", trace.raised_error);
        full.unwrap().max_abs_diff(&inc.unwrap()).unwrap()
    }

    #[test]
    fn clean_decode_matches_full_pass() {
        for (l, pos) in [
            (1, PosEncoding::SinusoidalAbsolute),
            (7, PosEncoding::Disabled),
            (24, PosEncoding::RelativeBucketed { num_buckets: 16, max_distance: 32 }),
            (32, PosEncoding::LearnedAbsolute { max_positions: 64 }),
        ] {
            let config = AttentionConfig {
                seq_len: l,
                pos_encoding: pos,
                ..AttentionConfig::default()
            };
            let (x, w) = setup(&config, l as u64);
            assert!(max_diff(&config, &x, &w, &DecodeOptions::default()) <= 1e-9);
        }
    }

    #[test]
    fn stale_cache_after_weight_swap_diverges() {
        let config = AttentionConfig::default();
        let (x, w) = setup(&config, 3);
        let new = AttentionWeights::random(&config, &mut rng::seeded(99));
        let run = |invalidate| {
            let dec = DecodeOptions {
                fault: DecodeFault::WeightSwap {
                    at_step: 8,
                    new_weights: Box::new(new.clone()),
                    invalidate,
                },
                ..Default::default()
            };
            incremental_decode(&config, &x, &w, &RunOptions::default(), &dec, &mut config.rng()).0.unwrap()
        };
        let (fresh, stale) = (run(true), run(false));
        assert!(fresh.max_abs_diff(&stale).unwrap() > 1e-3);
        // invalidated decode equals a full pass with the new weights from step 8 on
        let (full_new, _) = attention_forward(&config, &x, &new, &RunOptions::default(), &mut config.rng());
        let full_new = full_new.unwrap();
        let d = config.d_v;
        for bi in 0..config.batch {
            for t in 8..config.seq_len {
                let i = (bi * config.seq_len + t) * d;
                for c in 0..d {
                    assert!((fresh.data()[i + c] - full_new.data()[i + c]).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn replicas_diverge_after_skipped_sync() {
        let config = AttentionConfig::default();
        let (x, w) = setup(&config, 4);
        let dec = DecodeOptions {
            fault: DecodeFault::Replicas { skip_from: 16 },
            ..Default::default()
        };
        let (y, trace) = incremental_decode(&config, &x, &w, &RunOptions::default(), &dec, &mut config.rng());
        let clean = incremental_decode(&config, &x, &w, &RunOptions::default(), &DecodeOptions::default(), &mut config.rng()).0;
        let (y, clean) = (y.unwrap(), clean.unwrap());
        let diff_at = |t: usize| {
            (0..config.d_v)
                .map(|c| (y.data()[t * config.d_v + c] - clean.data()[t * config.d_v + c]).abs())
                .fold(0.0, f64::max)
        };
        assert_eq!(diff_at(15), 0.0);
        assert!(diff_at(17) > 1e-6);
        assert_eq!(trace.cache_events[15].divergence, Some(0));
        assert!(trace.cache_events[17].divergence.unwrap() > 0);
    }

    #[test]
    fn non_causal_config_rejected() {
        let config = AttentionConfig {
            mask_mode: MaskMode::None,
            ..AttentionConfig::default()
        };
        let (x, w) = setup(&config, 1);
        let (y, trace) = incremental_decode(&config, &x, &w, &RunOptions::default(), &DecodeOptions::default(), &mut config.rng());
        assert!(y.is_err());
        assert_eq!(trace.raised_error.unwrap().kind, "invalid_config");
    }
}
