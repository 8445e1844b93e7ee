//! Simulated attention kernels: capability descriptors, dispatch with
//! fallback policies, and the scores-only memory model.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::engine::ops::Accumulate;
use crate::engine::{AttentionConfig, DType, EngineError};

pub const REFERENCE: &str = "reference";
pub const FLASH: &str = "flashlike";
pub const SDPA: &str = "sdpalike";
pub const XFORMERS: &str = "xformerslike";
/// Pseudo kernel resolved by the registry's variant selector.
pub const AUTO: &str = "auto";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionProfile {
    Exact,
    /// Products and partial sums rounded to the half-precision grid.
    RoundedIntermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelDescriptor {
    pub id: String,
    pub supported_dtypes: BTreeSet<DType>,
    pub max_seq_len: usize,
    /// `None` accepts any head size.
    #[serde(default)]
    pub supported_head_sizes: Option<BTreeSet<usize>>,
    pub allows_nonnull_mask: bool,
    pub cost_multiplier: f64,
    pub precision_profile: PrecisionProfile,
}

impl KernelDescriptor {
    pub(crate) fn accumulate(&self) -> Accumulate {
        match self.precision_profile {
            PrecisionProfile::Exact => Accumulate::Exact,
            PrecisionProfile::RoundedIntermediate => Accumulate::Rounded(DType::F16Sim),
        }
    }
}

/// Picks a kernel by sequence length when a config asks for [`AUTO`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSelector {
    pub short_kernel: String,
    pub long_kernel: String,
    /// Sequences up to this length count as short.
    pub threshold: usize,
}

impl VariantSelector {
    pub fn select(&self, seq_len: usize) -> &str {
        if seq_len <= self.threshold {
            &self.short_kernel
        } else {
            &self.long_kernel
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRegistry {
    pub kernels: Vec<KernelDescriptor>,
    #[serde(default)]
    pub auto: Option<VariantSelector>,
}

impl Default for KernelRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl KernelRegistry {
    pub fn standard() -> Self {
        let all: BTreeSet<DType> = DType::ALL.into_iter().collect();
        let half: BTreeSet<DType> = [DType::F16Sim, DType::BF16Sim].into_iter().collect();
        KernelRegistry {
            kernels: vec![
                KernelDescriptor {
                    id: REFERENCE.into(),
                    supported_dtypes: all.clone(),
                    max_seq_len: usize::MAX,
                    supported_head_sizes: None,
                    allows_nonnull_mask: true,
                    cost_multiplier: 4.0,
                    precision_profile: PrecisionProfile::Exact,
                },
                KernelDescriptor {
                    id: FLASH.into(),
                    supported_dtypes: half,
                    max_seq_len: 8192,
                    supported_head_sizes: Some([8, 16, 32, 64, 128, 256].into_iter().collect()),
                    allows_nonnull_mask: false,
                    cost_multiplier: 1.0,
                    precision_profile: PrecisionProfile::RoundedIntermediate,
                },
                KernelDescriptor {
                    id: SDPA.into(),
                    supported_dtypes: all.clone(),
                    max_seq_len: 8192,
                    supported_head_sizes: None,
                    allows_nonnull_mask: true,
                    cost_multiplier: 2.0,
                    precision_profile: PrecisionProfile::Exact,
                },
                KernelDescriptor {
                    id: XFORMERS.into(),
                    supported_dtypes: all,
                    max_seq_len: 16384,
                    supported_head_sizes: None,
                    allows_nonnull_mask: true,
                    cost_multiplier: 1.2,
                    precision_profile: PrecisionProfile::Exact,
                },
            ],
            auto: Some(VariantSelector {
                short_kernel: SDPA.into(),
                long_kernel: XFORMERS.into(),
                threshold: 16,
            }),
        }
    }

    pub fn get(&self, id: &str) -> Option<&KernelDescriptor> {
        self.kernels.iter().find(|k| k.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut KernelDescriptor> {
        self.kernels.iter_mut().find(|k| k.id == id)
    }

    /// Looks up a kernel, resolving [`AUTO`] through the selector.
    pub fn resolve(&self, id: &str, seq_len: usize) -> Result<&KernelDescriptor, EngineError> {
        let id = match (id, &self.auto) {
            (AUTO, Some(sel)) => sel.select(seq_len),
            _ => id,
        };
        self.get(id).ok_or_else(|| EngineError::UnknownKernel(id.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path)?;
        let reg: KernelRegistry = serde_json::from_str(&text)?;
        if reg.get(REFERENCE).is_none() {
            return Err(RegistryError::MissingReference);
        }
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("registry has no `reference` kernel")]
    MissingReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    DtypeUnsupported,
    SeqLenExceeded,
    HeadSizeUnsupported,
    MaskUnsupported,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: expected {}, got {}", self.constraint, self.expected, self.actual)
    }
}

/// Every constraint `config` breaks on `kernel`. Causal masking is a native
/// kernel flag; only an explicit (padding) mask counts as `mask_present`.
pub fn check_capabilities(
    kernel: &KernelDescriptor,
    config: &AttentionConfig,
    mask_present: bool,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if !kernel.supported_dtypes.contains(&config.dtype) {
        let names: Vec<String> = kernel.supported_dtypes.iter().map(|d| d.to_string()).collect();
        out.push(Violation {
            constraint: Constraint::DtypeUnsupported,
            expected: names.join("|"),
            actual: config.dtype.to_string(),
        });
    }
    if config.seq_len > kernel.max_seq_len {
        out.push(Violation {
            constraint: Constraint::SeqLenExceeded,
            expected: format!("<= {}", kernel.max_seq_len),
            actual: config.seq_len.to_string(),
        });
    }
    if let Some(sizes) = &kernel.supported_head_sizes {
        if !sizes.contains(&config.d_head) {
            let names: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
            out.push(Violation {
                constraint: Constraint::HeadSizeUnsupported,
                expected: names.join("|"),
                actual: config.d_head.to_string(),
            });
        }
    }
    if mask_present && !kernel.allows_nonnull_mask {
        out.push(Violation {
            constraint: Constraint::MaskUnsupported,
            expected: "null mask".into(),
            actual: "non-null mask".into(),
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DispatchPolicy {
    #[default]
    StrictFail,
    SilentFallbackFaulty,
    WarnedFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchReason {
    Direct,
    SilentFallback,
    WarnedFallback,
    ExplicitReject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchEvent {
    pub requested: String,
    pub selected: String,
    pub reason: DispatchReason,
    pub warned: bool,
    pub cost_incurred: f64,
}

/// Outcome of [`dispatch`]. A rejection still carries its event so traces
/// can record it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch<'r> {
    pub kernel: &'r KernelDescriptor,
    pub event: DispatchEvent,
    pub violations: Vec<Violation>,
}

impl Dispatch<'_> {
    pub fn rejected(&self) -> bool {
        self.event.reason == DispatchReason::ExplicitReject
    }

    pub fn into_result(self) -> Result<(KernelDescriptor, DispatchEvent), EngineError> {
        if self.rejected() {
            Err(EngineError::KernelReject(self.violations))
        } else {
            Ok((self.kernel.clone(), self.event))
        }
    }
}

/// Selects a kernel for `config` under `policy`. Fails only for an unknown
/// kernel id or a registry without the reference kernel; a capability
/// rejection is reported through [`Dispatch::rejected`].
pub fn dispatch<'r>(
    config: &AttentionConfig,
    registry: &'r KernelRegistry,
    policy: DispatchPolicy,
) -> Result<Dispatch<'r>, EngineError> {
    let requested = registry.resolve(&config.kernel, config.seq_len)?;
    let violations = check_capabilities(requested, config, config.mask_mode.padding());
    if violations.is_empty() {
        return Ok(Dispatch {
            kernel: requested,
            event: DispatchEvent {
                requested: requested.id.clone(),
                selected: requested.id.clone(),
                reason: DispatchReason::Direct,
                warned: false,
                cost_incurred: requested.cost_multiplier,
            },
            violations,
        });
    }
    let fallback = registry
        .get(REFERENCE)
        .ok_or_else(|| EngineError::UnknownKernel(REFERENCE.into()))?;
    let (kernel, reason, warned) = match policy {
        DispatchPolicy::StrictFail => (requested, DispatchReason::ExplicitReject, true),
        DispatchPolicy::SilentFallbackFaulty => (fallback, DispatchReason::SilentFallback, false),
        DispatchPolicy::WarnedFallback => (fallback, DispatchReason::WarnedFallback, true),
    };
    Ok(Dispatch {
        kernel,
        event: DispatchEvent {
            requested: requested.id.clone(),
            selected: kernel.id.clone(),
            reason,
            warned,
            cost_incurred: if reason == DispatchReason::ExplicitReject {
                0.0
            } else {
                kernel.cost_multiplier
            },
        },
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    /// Capacity in scalar elements.
    pub m_avail: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomEvent {
    pub required: u64,
    pub available: u64,
}

/// `B · L² · d_h` score elements.
pub fn kernel_memory_required(batch: u64, seq_len: u64, d_head: u64) -> Result<u64, EngineError> {
    seq_len
        .checked_mul(seq_len)
        .and_then(|x| x.checked_mul(batch))
        .and_then(|x| x.checked_mul(d_head))
        .ok_or(EngineError::CapacityOverflow)
}

/// An OOM event iff the requirement strictly exceeds capacity.
pub fn simulate_oom(config: &AttentionConfig, memory: &MemoryModel) -> Result<Option<OomEvent>, EngineError> {
    let required =
        kernel_memory_required(config.batch as u64, config.seq_len as u64, config.d_head as u64)?;
    Ok((required > memory.m_avail).then_some(OomEvent {
        required,
        available: memory.m_avail,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::MaskMode;

    fn cfg(dtype: DType, kernel: &str) -> AttentionConfig {
        AttentionConfig {
            dtype,
            kernel: kernel.into(),
            ..AttentionConfig::default()
        }
    }

    #[test]
    fn memory_examples() {
        assert_eq!(kernel_memory_required(1, 128, 64).unwrap(), 128 * 128 * 64);
        assert_eq!(kernel_memory_required(1, 128, 64).unwrap(), 1_048_576);
        assert_eq!(kernel_memory_required(4, 2048, 64).unwrap(), 4 * 2048 * 2048 * 64);
        assert_eq!(kernel_memory_required(4, 2048, 64).unwrap(), 1_073_741_824);
        assert_eq!(kernel_memory_required(1, 1, 1).unwrap(), 1);
        assert_eq!(
            kernel_memory_required(2, u64::MAX / 2, 1),
            Err(EngineError::CapacityOverflow)
        );
    }

    #[test]
    fn oom_boundary_is_strict() {
        let big = AttentionConfig {
            batch: 4,
            seq_len: 2048,
            d_head: 64,
            ..Default::default()
        };
        let mem = MemoryModel { m_avail: 1_000_000_000 };
        assert_eq!(
            simulate_oom(&big, &mem).unwrap(),
            Some(OomEvent {
                required: 1_073_741_824,
                available: 1_000_000_000
            })
        );
        let small = AttentionConfig {
            batch: 1,
            seq_len: 128,
            d_head: 64,
            ..Default::default()
        };
        assert_eq!(simulate_oom(&small, &mem).unwrap(), None);
        let exact = MemoryModel { m_avail: 1_048_576 };
        assert_eq!(simulate_oom(&small, &exact).unwrap(), None);
    }

    #[test]
    fn capability_examples() {
        let reg = KernelRegistry::standard();
        let flash = reg.get(FLASH).unwrap();
        let v = check_capabilities(flash, &cfg(DType::F32Sim, FLASH), false);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].constraint, Constraint::DtypeUnsupported);

        let long = AttentionConfig {
            seq_len: 16384,
            ..cfg(DType::F16Sim, FLASH)
        };
        let v = check_capabilities(flash, &long, false);
        assert_eq!(v.iter().map(|x| x.constraint).collect::<Vec<_>>(), [Constraint::SeqLenExceeded]);
        assert_eq!(v[0].expected, "<= 8192");

        let reference = reg.get(REFERENCE).unwrap();
        for dt in DType::ALL {
            let c = AttentionConfig {
                seq_len: 100_000,
                d_head: 7,
                ..cfg(dt, REFERENCE)
            };
            assert!(check_capabilities(reference, &c, true).is_empty());
        }
    }

    #[test]
    fn dispatch_policies() {
        let reg = KernelRegistry::standard();
        let mut c = cfg(DType::F16Sim, FLASH);
        c.mask_mode = MaskMode::CausalPlusPadding;

        let d = dispatch(&c, &reg, DispatchPolicy::SilentFallbackFaulty).unwrap();
        assert_eq!(d.event.selected, REFERENCE);
        assert_eq!(d.event.reason, DispatchReason::SilentFallback);
        assert!(!d.event.warned);
        assert!(d.event.cost_incurred > reg.get(FLASH).unwrap().cost_multiplier);

        let d = dispatch(&c, &reg, DispatchPolicy::StrictFail).unwrap();
        assert!(matches!(d.into_result(), Err(EngineError::KernelReject(v)) if v[0].constraint == Constraint::MaskUnsupported));

        let d = dispatch(&c, &reg, DispatchPolicy::WarnedFallback).unwrap();
        assert!(d.event.warned);
        assert_eq!(d.event.selected, REFERENCE);

        c.mask_mode = MaskMode::Causal;
        let d = dispatch(&c, &reg, DispatchPolicy::StrictFail).unwrap();
        assert_eq!(d.event.reason, DispatchReason::Direct);
        assert_eq!(d.event.requested, d.event.selected);
    }

    #[test]
    fn auto_resolves_by_length() {
        let reg = KernelRegistry::standard();
        assert_eq!(reg.resolve(AUTO, 8).unwrap().id, SDPA);
        assert_eq!(reg.resolve(AUTO, 64).unwrap().id, XFORMERS);
        assert!(matches!(reg.resolve("nope", 8), Err(EngineError::UnknownKernel(_))));
    }

    #[test]
    fn registry_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernels.json");
        let reg = KernelRegistry::standard();
        reg.save(&path).unwrap();
        assert_eq!(KernelRegistry::load(&path).unwrap(), reg);

        let mut bad = reg.clone();
        bad.kernels.retain(|k| k.id != REFERENCE);
        bad.save(&path).unwrap();
        assert!(matches!(KernelRegistry::load(&path), Err(RegistryError::MissingReference)));
    }
}
