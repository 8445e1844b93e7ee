//! Attention fault toolkit: a reference attention engine, one injector per
//! root cause of attention-specific faults, heuristic diagnosis and
//! evaluation metrics.

pub mod diagnose;
pub mod engine;
pub mod harness;
pub mod inject;
pub mod kernels;
pub mod kvcache;
pub mod metrics;
pub mod rng;
mod serde_util;
pub mod taxonomy;
