//! Faulty and clean run setups for each root cause.

use std::collections::{BTreeMap, BTreeSet};

use super::probe::{frozen_parameter_probe, UpdateStep};
use crate::engine::{
    attention_forward, random_input, AttentionConfig, AttentionWeights, DType, DropoutPlacement,
    HeadMerge, MaskMode, MaskOverride, PosEncoding, RunOptions, RunTrace, Tensor,
};
use crate::kernels::{self, DispatchPolicy, PrecisionProfile, VariantSelector};
use crate::kvcache::{incremental_decode, CacheLayout, DecodeFault, DecodeOptions};
use crate::rng;
use crate::taxonomy::RootCause;

/// Injected scenarios run on at least this many positions so that latent
/// faults have room to surface past the horizon.
pub const MIN_SEQ_LEN: usize = 24;

/// F16 largest finite value is 65504; this lands safely past it.
const OVERFLOW_LOGIT: f64 = 70_000.0;

/// A fully specified run: config, input, weights and pipeline faults.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: AttentionConfig,
    pub x: Tensor,
    pub weights: AttentionWeights,
    pub opts: RunOptions,
    pub decode: Option<DecodeOptions>,
    /// Parameters registered with the update probe; no probe when absent.
    pub registered: Option<BTreeSet<String>>,
    pub update: UpdateStep,
}

impl Scenario {
    fn new(config: AttentionConfig, seed: u64) -> Self {
        let x = random_input(&config, &mut rng::stream(seed, "input"));
        let weights = AttentionWeights::random(&config, &mut rng::stream(seed, "weights"));
        Scenario {
            config,
            x,
            weights,
            opts: RunOptions::default(),
            decode: None,
            registered: None,
            update: UpdateStep {
                seed: rng::derive_seed(seed, "update"),
                lr: 0.05,
            },
        }
    }

    fn decoding(mut self, dec: DecodeOptions) -> Self {
        self.decode = Some(dec);
        self
    }

    pub fn run(&self) -> RunTrace {
        let mut weights = self.weights.clone();
        let mut probe = BTreeMap::new();
        if let Some(registered) = &self.registered {
            let mut params = weights.to_params();
            probe = frozen_parameter_probe(&mut params, registered, &self.update);
            weights = AttentionWeights::from_params(params).expect("probe keeps every parameter");
        }
        let mut r = self.config.rng();
        let (_, mut trace) = match &self.decode {
            Some(dec) => incremental_decode(&self.config, &self.x, &weights, &self.opts, dec, &mut r),
            None => attention_forward(&self.config, &self.x, &weights, &self.opts, &mut r),
        };
        trace.probe_results = probe;
        trace
    }
}

fn base_config(base: &AttentionConfig, seed: u64) -> AttentionConfig {
    AttentionConfig {
        seq_len: base.seq_len.max(MIN_SEQ_LEN),
        seed,
        ..base.clone()
    }
}

fn decode_config(base: &AttentionConfig, seed: u64) -> AttentionConfig {
    AttentionConfig {
        mask_mode: MaskMode::Causal,
        dropout_rate: 0.0,
        ..base_config(base, seed)
    }
}

fn relative() -> PosEncoding {
    PosEncoding::RelativeBucketed {
        num_buckets: 32,
        max_distance: 128,
    }
}

fn same(config: AttentionConfig, seed: u64) -> (Scenario, Scenario) {
    let s = Scenario::new(config, seed);
    (s.clone(), s)
}

/// `(faulty, clean)` setups for `rc`.
pub(crate) fn build(rc: RootCause, base: &AttentionConfig, seed: u64) -> (Scenario, Scenario) {
    use RootCause::*;
    let c = base_config(base, seed);
    match rc {
        MaskGeneration => {
            let (mut f, o) = same(
                AttentionConfig {
                    mask_mode: MaskMode::CausalPlusPadding,
                    ..c
                },
                seed,
            );
            f.opts.perturb.mask_override = Some(MaskOverride::AllZero);
            (f, o)
        }
        MaskApplication => {
            let (mut f, o) = same(
                AttentionConfig {
                    mask_mode: MaskMode::Causal,
                    ..c
                },
                seed,
            );
            f.opts.perturb.mask_after_softmax = true;
            (f, o)
        }
        DynamicMaskMismatch => {
            let c = AttentionConfig {
                mask_mode: MaskMode::Causal,
                ..c
            };
            let built_for = c.seq_len / 2;
            let (mut f, o) = same(c, seed);
            f.opts.perturb.mask_override = Some(MaskOverride::Stale { built_for });
            (f, o)
        }
        DimensionMismatch => {
            let faulty = AttentionConfig {
                d_q: 2 * c.d_k,
                ..c.clone()
            };
            (Scenario::new(faulty, seed), Scenario::new(c, seed))
        }
        ParameterInitialization => {
            let (mut f, o) = same(c, seed);
            f.weights.wq = Tensor::zeros(f.weights.wq.shape().to_vec(), f.weights.wq.dtype());
            f.weights.wk = Tensor::zeros(f.weights.wk.shape().to_vec(), f.weights.wk.dtype());
            (f, o)
        }
        HeadInteraction => {
            let (mut f, o) = same(c, seed);
            f.opts.perturb.head_merge = HeadMerge::Summed;
            (f, o)
        }
        DynamicParameterRegistration => {
            let (mut f, mut o) = same(c, seed);
            let adapter = Tensor::zeros(f.weights.wq.shape().to_vec(), f.weights.wq.dtype());
            f.weights.wq_adapter = Some(adapter.clone());
            o.weights.wq_adapter = Some(adapter);
            let core: BTreeSet<String> = ["wq", "wk", "wv"].iter().map(|s| s.to_string()).collect();
            let mut all = core.clone();
            all.insert("wq_adapter".into());
            f.registered = Some(core);
            o.registered = Some(all);
            (f, o)
        }
        MissingScaling => {
            let c = AttentionConfig {
                scaling_enabled: true,
                ..c
            };
            let (mut f, o) = same(c, seed);
            f.config.scaling_enabled = false;
            (f, o)
        }
        NormalizationFault => {
            let c = AttentionConfig {
                dropout_rate: 0.1,
                dropout_placement: DropoutPlacement::AfterSoftmaxPreAggregation,
                ..c
            };
            let (mut f, o) = same(c, seed);
            f.config.dropout_placement = DropoutPlacement::AfterNormalizationFaulty;
            (f, o)
        }
        PrecisionFault => precision_fault(c, seed),
        HardwareIncompat => {
            let c = AttentionConfig {
                dtype: DType::F32Sim,
                dispatch_policy: DispatchPolicy::StrictFail,
                ..c
            };
            let (mut f, o) = same(c, seed);
            f.config.kernel = kernels::FLASH.into();
            (f, o)
        }
        FeatureConstraint => {
            let c = AttentionConfig {
                dtype: DType::F16Sim,
                mask_mode: MaskMode::CausalPlusPadding,
                dispatch_policy: DispatchPolicy::StrictFail,
                ..c
            };
            let (mut f, o) = same(c, seed);
            f.config.kernel = kernels::FLASH.into();
            (f, o)
        }
        SilentFallback => {
            let c = AttentionConfig {
                dtype: DType::F16Sim,
                mask_mode: MaskMode::CausalPlusPadding,
                kernel: kernels::FLASH.into(),
                dispatch_policy: DispatchPolicy::WarnedFallback,
                ..c
            };
            let (mut f, o) = same(c, seed);
            f.config.dispatch_policy = DispatchPolicy::SilentFallbackFaulty;
            (f, o)
        }
        KernelPrecision => {
            let (mut f, o) = same(
                AttentionConfig {
                    kernel: kernels::SDPA.into(),
                    ..c
                },
                seed,
            );
            f.opts
                .registry
                .get_mut(kernels::SDPA)
                .expect("standard registry")
                .precision_profile = PrecisionProfile::RoundedIntermediate;
            (f, o)
        }
        KernelMemory => {
            let (mut f, o) = same(c, seed);
            let required = kernels::kernel_memory_required(
                f.config.batch as u64,
                f.config.seq_len as u64,
                f.config.d_head as u64,
            )
            .unwrap_or(u64::MAX);
            f.config.memory_capacity = required / 2;
            (f, o)
        }
        IndexingFault => {
            let (mut f, o) = same(
                AttentionConfig {
                    pos_encoding: PosEncoding::SinusoidalAbsolute,
                    ..c
                },
                seed,
            );
            f.opts.perturb.position_offset = 1;
            (f, o)
        }
        InterpolationFault => {
            let faulty = AttentionConfig {
                pos_encoding: PosEncoding::LearnedAbsolute {
                    max_positions: c.seq_len / 2,
                },
                ..c.clone()
            };
            let clean = AttentionConfig {
                pos_encoding: PosEncoding::LearnedAbsolute {
                    max_positions: c.seq_len,
                },
                ..c
            };
            (Scenario::new(faulty, seed), Scenario::new(clean, seed))
        }
        RelativeMismatch => {
            let (mut f, o) = same(
                AttentionConfig {
                    pos_encoding: relative(),
                    ..c
                },
                seed,
            );
            f.opts.perturb.bucket_offset = 1;
            (f, o)
        }
        CacheInvalidation => {
            let c = decode_config(base, seed);
            let new_weights = AttentionWeights::random(&c, &mut rng::stream(seed, "weights/swapped"));
            let swap = |invalidate| DecodeOptions {
                layout: CacheLayout::Canonical,
                fault: DecodeFault::WeightSwap {
                    at_step: 8,
                    new_weights: Box::new(new_weights.clone()),
                    invalidate,
                },
            };
            let (f, o) = same(c, seed);
            (f.decoding(swap(false)), o.decoding(swap(true)))
        }
        MemoryLayout => {
            let (f, o) = same(decode_config(base, seed), seed);
            (
                f.decoding(DecodeOptions {
                    layout: CacheLayout::TransposedFaulty,
                    fault: DecodeFault::None,
                }),
                o.decoding(DecodeOptions::default()),
            )
        }
        UpdateSynchronization => {
            let (f, o) = same(decode_config(base, seed), seed);
            (
                f.decoding(DecodeOptions {
                    layout: CacheLayout::Canonical,
                    fault: DecodeFault::SplitWrite { step: 18 },
                }),
                o.decoding(DecodeOptions::default()),
            )
        }
        CachePositionMismatch => {
            let c = AttentionConfig {
                pos_encoding: relative(),
                ..decode_config(base, seed)
            };
            let (f, o) = same(c, seed);
            (
                f.decoding(DecodeOptions {
                    layout: CacheLayout::Canonical,
                    fault: DecodeFault::StalePositions { from: 16 },
                }),
                o.decoding(DecodeOptions::default()),
            )
        }
        DistributedSync => {
            let (f, o) = same(decode_config(base, seed), seed);
            (
                f.decoding(DecodeOptions {
                    layout: CacheLayout::Canonical,
                    fault: DecodeFault::Replicas { skip_from: 16 },
                }),
                o.decoding(DecodeOptions::default()),
            )
        }
        DynamicDispatch => {
            let (mut f, o) = same(
                AttentionConfig {
                    kernel: kernels::AUTO.into(),
                    ..c
                },
                seed,
            );
            // Threshold far past any realistic length: the short-sequence
            // variant is used for everything.
            f.opts.registry.auto = Some(VariantSelector {
                short_kernel: kernels::SDPA.into(),
                long_kernel: kernels::XFORMERS.into(),
                threshold: 1 << 20,
            });
            (f, o)
        }
        VariantConfiguration => {
            let (mut f, o) = same(
                AttentionConfig {
                    pos_encoding: relative(),
                    ..c
                },
                seed,
            );
            f.opts.perturb.relative_bias_disabled = true;
            (f, o)
        }
    }
}

/// Input channel 0 is nonzero only for the first token of batch 0, and
/// head 0's first query and key dimensions read channel 0 alone. The one
/// score between that token and itself is pushed past the half-precision
/// range; every other score is untouched.
fn precision_fault(c: AttentionConfig, seed: u64) -> (Scenario, Scenario) {
    let c = AttentionConfig {
        pos_encoding: PosEncoding::Disabled,
        ..c
    };
    let mut s = Scenario::new(c, seed);
    let (b, l, dm) = (s.config.batch, s.config.seq_len, s.config.d_model);
    for bi in 0..b {
        for li in 0..l {
            s.x.set(&[bi, li, 0], if bi == 0 && li == 0 { 1.0 } else { 0.0 });
        }
    }
    let scale = if s.config.scaling_enabled {
        (s.config.d_k as f64 / s.config.n_heads as f64).sqrt()
    } else {
        1.0
    };
    let alpha = (OVERFLOW_LOGIT * scale).sqrt();
    for w in [&mut s.weights.wq, &mut s.weights.wk] {
        for r in 0..dm {
            w.set(&[r, 0], if r == 0 { alpha } else { 0.0 });
        }
    }
    let clean = s.clone();
    s.opts.perturb.score_dtype = Some(DType::F16Sim);
    (s, clean)
}
