//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use attnfault::engine::{AttentionConfig, DType, MaskMode, PosEncoding, RunTrace, Stage};
use attnfault::engine::build_causal_mask;
use attnfault::harness::run_config;
use attnfault::taxonomy::Heuristic;

pub const MASK_MODES: [MaskMode; 4] = [MaskMode::None, MaskMode::Causal, MaskMode::Padding, MaskMode::CausalPlusPadding];

pub fn encodings(seq_len: usize) -> [PosEncoding; 4] {
    [
        PosEncoding::Disabled,
        PosEncoding::SinusoidalAbsolute,
        PosEncoding::LearnedAbsolute { max_positions: seq_len },
        PosEncoding::RelativeBucketed {
            num_buckets: 32,
            max_distance: 128,
        },
    ]
}

/// Valid configs over B in {1,4}, L in {1,8,128}, n_heads in {1,8}, every
/// mask mode and encoding, with the dtype cycling through all four.
pub fn clean_suite() -> Vec<AttentionConfig> {
    let mut out = Vec::new();
    let mut k = 0usize;
    for batch in [1, 4] {
        for seq_len in [1, 8, 128] {
            for n_heads in [1, 8] {
                for mask_mode in MASK_MODES {
                    for pos_encoding in encodings(seq_len) {
                        out.push(AttentionConfig {
                            mask_mode,
                            pos_encoding,
                            dtype: DType::ALL[k % DType::ALL.len()],
                            seed: k as u64,
                            ..AttentionConfig::multi_head(batch, seq_len, n_heads, 8)
                        });
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

/// Clean trace used as the starting point for single-condition traces.
pub fn reference_trace() -> RunTrace {
    run_config(
        &AttentionConfig {
            mask_mode: MaskMode::CausalPlusPadding,
            ..AttentionConfig::default()
        },
        None,
    )
}

pub struct Condition {
    pub name: &'static str,
    pub heuristic: Heuristic,
    pub apply: fn(&mut RunTrace),
}

fn set_summary(t: &mut RunTrace, stage: Stage, name: &str, f: impl Fn(&mut attnfault::engine::TensorSummary)) {
    for rec in t.stages.iter_mut().filter(|s| s.stage == stage) {
        for s in rec.tensors.iter_mut().filter(|s| s.name == name) {
            f(s);
        }
    }
}

fn first_weights(t: &mut RunTrace) -> &mut attnfault::engine::WeightStats {
    t.stages
        .iter_mut()
        .flat_map(|s| s.tensors.iter_mut())
        .find_map(|s| s.weights.as_mut())
        .expect("trace has attention weights")
}

fn set_mask(t: &mut RunTrace, index: [usize; 4], value: f64) {
    t.mask_snapshot.as_mut().expect("trace has a mask").set(&index, value);
}

/// One trace edit per disjunct of H1 to H4, each touching only the
/// inputs of its own heuristic. The reference trace has B=2, L=24 and the
/// first batch row keeps 21 tokens.
pub fn conditions() -> Vec<Condition> {
    vec![
        Condition {
            name: "d_q != d_k",
            heuristic: Heuristic::H1,
            apply: |t| t.config.d_q = 64,
        },
        Condition {
            name: "d_model != n_heads * d_head",
            heuristic: Heuristic::H1,
            apply: |t| t.config.d_model = 33,
        },
        Condition {
            name: "dtype(Q) != dtype(K)",
            heuristic: Heuristic::H1,
            apply: |t| set_summary(t, Stage::Project, "q", |s| s.dtype = DType::F16Sim),
        },
        Condition {
            name: "dtype(K) != dtype(V)",
            heuristic: Heuristic::H1,
            apply: |t| set_summary(t, Stage::Project, "v", |s| s.dtype = DType::F32Sim),
        },
        Condition {
            name: "non-finite projection",
            heuristic: Heuristic::H1,
            apply: |t| set_summary(t, Stage::Project, "k", |s| s.inf_count = 1),
        },
        Condition {
            name: "entropy collapse",
            heuristic: Heuristic::H2,
            apply: |t| first_weights(t).entropy_mean = Some(0.05),
        },
        Condition {
            name: "future position unblocked",
            heuristic: Heuristic::H2,
            apply: |t| set_mask(t, [0, 0, 0, 2], 0.0),
        },
        Condition {
            name: "position index past table",
            heuristic: Heuristic::H2,
            apply: |t| t.position_limit = Some(10),
        },
        Condition {
            name: "row sum off one",
            heuristic: Heuristic::H2,
            apply: |t| first_weights(t).row_sums[0] = 1.01,
        },
        Condition {
            name: "mask shape not broadcastable",
            heuristic: Heuristic::H3,
            apply: |t| t.mask_snapshot = Some(build_causal_mask(t.config.seq_len + 1)),
        },
        Condition {
            name: "non-finite mask entry",
            heuristic: Heuristic::H3,
            apply: |t| set_mask(t, [0, 0, 1, 0], f64::NAN),
        },
        Condition {
            name: "padded key unmasked",
            heuristic: Heuristic::H3,
            apply: |t| set_mask(t, [0, 0, 23, 23], 0.0),
        },
        Condition {
            name: "sequence longer than kernel limit",
            heuristic: Heuristic::H4,
            apply: |t| t.kernel.as_mut().expect("kernel recorded").max_seq_len = 16,
        },
        Condition {
            name: "working set exceeds memory",
            heuristic: Heuristic::H4,
            apply: |t| t.memory.as_mut().expect("memory recorded").m_avail = 1,
        },
    ]
}
