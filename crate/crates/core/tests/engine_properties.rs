mod common;

use proptest::prelude::*;

use attnfault::engine::{
    attention_forward, random_input, AttentionConfig, AttentionWeights, DType, MaskMode, RunOptions, Tensor,
};
use attnfault::harness::{run_config, trace_to_string};
use attnfault::kernels::{DispatchPolicy, DispatchReason, KernelRegistry, AUTO, FLASH, REFERENCE, SDPA, XFORMERS};
use attnfault::kvcache::{incremental_decode, DecodeOptions};
use attnfault::rng;

fn config() -> impl Strategy<Value = AttentionConfig> {
    (
        1usize..=3,
        1usize..=20,
        prop::sample::select(vec![1usize, 2, 4]),
        prop::sample::select(vec![2usize, 4, 8]),
        0usize..4,
        0usize..4,
        0usize..4,
        any::<u64>(),
    )
        .prop_map(|(b, l, h, dh, m, e, d, seed)| AttentionConfig {
            mask_mode: common::MASK_MODES[m],
            pos_encoding: common::encodings(l)[e],
            dtype: DType::ALL[d],
            seed,
            ..AttentionConfig::multi_head(b, l, h, dh)
        })
}

fn setup(c: &AttentionConfig) -> (Tensor, AttentionWeights) {
    (
        random_input(c, &mut rng::stream(c.seed, "input")),
        AttentionWeights::random(c, &mut rng::stream(c.seed, "weights")),
    )
}

fn forward(c: &AttentionConfig, x: &Tensor, w: &AttentionWeights) -> Tensor {
    attention_forward(c, x, w, &RunOptions::default(), &mut c.rng()).0.unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn runs_are_deterministic(c in config()) {
        prop_assert_eq!(trace_to_string(&run_config(&c, None)), trace_to_string(&run_config(&c, None)));
    }

    #[test]
    fn weight_rows_sum_to_one(c in config()) {
        let t = run_config(&c, None);
        prop_assert!(t.raised_error.is_none());
        let tol = c.dtype.row_sum_tolerance();
        for s in t.weight_stats().flat_map(|w| &w.row_sums) {
            prop_assert!((s - 1.0).abs() <= tol, "row sum {} at {:?}", s, c.dtype);
        }
    }

    #[test]
    fn causal_prefix_ignores_future(c in config(), t_frac in 0.0f64..1.0, noise in any::<u64>()) {
        let c = AttentionConfig { mask_mode: MaskMode::Causal, ..c };
        prop_assume!(c.seq_len > 1);
        let t = ((c.seq_len - 1) as f64 * t_frac) as usize;
        let (x, w) = setup(&c);
        let y = forward(&c, &x, &w);
        let d = c.d_model;
        let mut r = rng::seeded(noise);
        let future = rng::gaussian_vec(&mut r, x.len(), 2.0);
        let data: Vec<f64> = x.data().iter().enumerate()
            .map(|(i, &v)| if (i / d) % c.seq_len > t { future[i] } else { v })
            .collect();
        let xp = Tensor::new(x.shape().to_vec(), x.dtype(), data).unwrap();
        let yp = forward(&c, &xp, &w);
        let dv = y.last_dim();
        for (i, (a, b)) in y.data().iter().zip(yp.data()).enumerate() {
            if (i / dv) % c.seq_len <= t {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn decode_matches_full_pass(c in config()) {
        let c = AttentionConfig { mask_mode: MaskMode::Causal, dtype: DType::F64Sim, ..c };
        let (x, w) = setup(&c);
        let full = forward(&c, &x, &w);
        let (inc, trace) = incremental_decode(&c, &x, &w, &RunOptions::default(), &DecodeOptions::default(), &mut c.rng());
        prop_assert!(full.max_abs_diff(&inc.unwrap()).unwrap() <= 1e-9);
        // Cache events only ever grow the cache by one entry.
        for (step, e) in trace.cache_events.iter().enumerate() {
            prop_assert_eq!(e.step, step);
            prop_assert_eq!(e.length, step + 1);
            prop_assert_eq!(&e.position_ids, &(0..=step).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dispatch_is_total(
        c in config(),
        kernel in prop::sample::select(vec![REFERENCE, FLASH, SDPA, XFORMERS, AUTO]),
        policy in prop::sample::select(vec![DispatchPolicy::StrictFail, DispatchPolicy::SilentFallbackFaulty, DispatchPolicy::WarnedFallback]),
    ) {
        let c = AttentionConfig { kernel: kernel.to_string(), dispatch_policy: policy, ..c };
        let t = run_config(&c, Some(&KernelRegistry::standard()));
        let events = &t.dispatch_events;
        prop_assert_eq!(events.len(), 1);
        let e = &events[0];
        match e.reason {
            DispatchReason::Direct => prop_assert!(t.raised_error.is_none()),
            DispatchReason::ExplicitReject => {
                prop_assert_eq!(policy, DispatchPolicy::StrictFail);
                prop_assert_eq!(t.raised_error.as_ref().map(|r| r.kind.as_str()), Some("kernel_reject"));
            }
            DispatchReason::SilentFallback => {
                prop_assert!(!e.warned);
                prop_assert_eq!(e.selected.as_str(), REFERENCE);
            }
            DispatchReason::WarnedFallback => prop_assert!(e.warned),
        }
    }
}

#[test]
fn missing_scaling_sharpens_attention() {
    for seed in 0..6 {
        let c = AttentionConfig { seed, ..AttentionConfig::multi_head(2, 24, 2, 16) };
        let scaled = run_config(&c, None);
        let raw = run_config(&AttentionConfig { scaling_enabled: false, ..c }, None);
        let h = |t: &attnfault::engine::RunTrace| t.weight_stats().next().unwrap().entropy_mean.unwrap();
        assert!(h(&raw) < h(&scaled), "seed {seed}");
    }
}
