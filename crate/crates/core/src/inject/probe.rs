use std::collections::{BTreeMap, BTreeSet};

use crate::engine::Tensor;
use crate::rng;

/// One deterministic stand-in for an optimiser step: every registered
/// parameter gets `lr * N(0, 1)` noise from a per-parameter stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStep {
    pub seed: u64,
    pub lr: f64,
}

impl Default for UpdateStep {
    fn default() -> Self {
        UpdateStep { seed: 0, lr: 0.05 }
    }
}

/// Applies `step` to the registered parameters in place and reports, for
/// every parameter, whether it moved. Unmoved parameters are frozen.
pub fn frozen_parameter_probe(
    params: &mut BTreeMap<String, Tensor>,
    registered: &BTreeSet<String>,
    step: &UpdateStep,
) -> BTreeMap<String, bool> {
    let mut moved = BTreeMap::new();
    for (name, t) in params.iter_mut() {
        let before = t.clone();
        if registered.contains(name) {
            let mut r = rng::stream(step.seed, &format!("update/{name}"));
            let noise = rng::gaussian_vec(&mut r, t.len(), 1.0);
            let data = t.data().iter().zip(noise).map(|(x, n)| x + step.lr * n).collect();
            *t = Tensor::quantized(t.shape().to_vec(), t.dtype(), data).expect("same shape");
        }
        let changed = before
            .data()
            .iter()
            .zip(t.data())
            .any(|(a, b)| a.to_bits() != b.to_bits());
        moved.insert(name.clone(), changed);
    }
    moved
}
