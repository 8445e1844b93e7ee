use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{inject_case, InjectError, InjectedCase};
use crate::engine::AttentionConfig;
use crate::rng;
use crate::taxonomy::{list_root_causes, FaultCategory};

/// Category shares in `FaultCategory::ALL` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions(pub [f64; 7]);

impl Proportions {
    /// Shares observed in the mined fault dataset.
    pub fn published() -> Self {
        Proportions(FaultCategory::ALL.map(|c| c.prevalence()))
    }

    pub fn uniform() -> Self {
        Proportions([1.0 / 7.0; 7])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "published" => Some(Self::published()),
            "uniform" => Some(Self::uniform()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), InjectError> {
        if let Some(p) = self.0.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(InjectError::InvalidProportions(format!("bad share {p}")));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(InjectError::InvalidProportions(format!("shares sum to {sum}")));
        }
        Ok(())
    }

    pub fn get(&self, c: FaultCategory) -> f64 {
        self.0[FaultCategory::ALL.iter().position(|&x| x == c).expect("listed")]
    }
}

/// Largest-remainder allocation of `n` cases. Ties go to the earlier
/// category.
pub fn allocate(n: usize, proportions: &Proportions) -> Result<[usize; 7], InjectError> {
    proportions.validate()?;
    let quotas = proportions.0.map(|p| p * n as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..7).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(counts)
}

/// Stratified corpus of `n` injected cases. Case `k` is `case-{k:05}` with
/// its seed derived from `seed` and the case id.
pub fn generate_corpus(
    n: usize,
    proportions: &Proportions,
    base: &AttentionConfig,
    seed: u64,
) -> Result<Vec<InjectedCase>, InjectError> {
    let counts = allocate(n, proportions)?;
    let mut plan = Vec::with_capacity(n);
    for (cat, count) in FaultCategory::ALL.into_iter().zip(counts) {
        let causes = list_root_causes(cat);
        for i in 0..count {
            plan.push(causes[i % causes.len()]);
        }
    }
    plan.into_par_iter()
        .enumerate()
        .map(|(k, rc)| {
            let case_id = format!("case-{k:05}");
            let case_seed = rng::derive_seed(seed, &case_id);
            inject_case(rc, base, case_seed, case_id)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_allocation_of_1000() {
        let counts = allocate(1000, &Proportions::published()).unwrap();
        assert_eq!(counts[0], 250);
        assert_eq!(counts.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn uniform_seven_is_balanced() {
        let counts = allocate(7, &Proportions::uniform()).unwrap();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }

    #[test]
    fn short_proportions_rejected() {
        let mut p = Proportions::uniform().0;
        p[0] -= 0.1;
        assert!(matches!(
            allocate(10, &Proportions(p)),
            Err(InjectError::InvalidProportions(_))
        ));
    }

    #[test]
    fn round_robin_within_category() {
        let cases = generate_corpus(12, &Proportions([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]), &AttentionConfig::default(), 5).unwrap();
        let causes = list_root_causes(FaultCategory::Masking);
        for (k, c) in cases.iter().enumerate() {
            assert_eq!(c.case_id, format!("case-{k:05}"));
            assert_eq!(c.label.root_cause, causes[k % causes.len()]);
        }
    }
}
