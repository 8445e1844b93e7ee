//! File-level plumbing behind the command-line tool: configs, traces,
//! corpus directories and evaluation reports.

mod manifest;
mod trace_io;

pub use manifest::{
    case_dir, config_digest, label_path, load_trace, oracle_path, read_json, read_manifest, save_trace,
    trace_path, write_corpus, write_json, LabelFile, Manifest, ManifestEntry, MANIFEST_FILE, MANIFEST_SCHEMA,
};
pub use trace_io::{read_trace, trace_from_str, trace_to_string, write_trace};

use rayon::prelude::*;
use std::path::{Path, PathBuf};

use crate::diagnose::{diagnose_with, DiagnoseError, DiagnoseOptions, DiagnosisReport};
use crate::engine::{attention_forward, random_input, AttentionConfig, AttentionWeights, EngineError, RunOptions, RunTrace};
use crate::inject::{generate_corpus, inject, InjectError, InjectedCase, Proportions};
use crate::kernels::{KernelRegistry, RegistryError};
use crate::metrics::{evaluate, MetricsError, MetricsReport};
use crate::rng;
use crate::taxonomy::{FaultLabel, RootCause};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ATTNFAULT_OUT";
pub const DEFAULT_OUT_DIR: &str = "attnfault-out";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(#[from] EngineError),
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("unsupported schema `{found}`, expected `{expected}`")]
    Schema { found: String, expected: &'static str },
    #[error("no corpus in {0}")]
    EmptyCorpus(PathBuf),
    #[error("missing traces for cases: {}", .0.join(", "))]
    MissingTraces(Vec<String>),
    #[error("case {case_id}: config digest {found} does not match manifest")]
    DigestMismatch { case_id: String, found: String },
    #[error(transparent)]
    Inject(#[from] InjectError),
    #[error(transparent)]
    Diagnose(#[from] DiagnoseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a config file and checks that the engine can attempt it.
pub fn load_config(path: &Path) -> Result<AttentionConfig, HarnessError> {
    let config: AttentionConfig = read_json(path)?;
    config.validate()?;
    Ok(config)
}

/// One forward pass on seeded input and weights drawn from the config's
/// seed.
pub fn run_config(config: &AttentionConfig, registry: Option<&KernelRegistry>) -> RunTrace {
    let x = random_input(config, &mut rng::stream(config.seed, "input"));
    let weights = AttentionWeights::random(config, &mut rng::stream(config.seed, "weights"));
    let opts = RunOptions {
        registry: registry.cloned().unwrap_or_default(),
        ..RunOptions::default()
    };
    let (_, trace) = attention_forward(config, &x, &weights, &opts, &mut config.rng());
    trace
}

/// Injects one fault and writes it as a single-case corpus under `out`.
pub fn inject_to_dir(
    root_cause: RootCause,
    base: &AttentionConfig,
    seed: u64,
    out: &Path,
) -> Result<InjectedCase, HarnessError> {
    let case = inject(root_cause, base, seed)?;
    write_corpus(out, std::slice::from_ref(&case), seed, None, base)?;
    Ok(case)
}

pub fn corpus_to_dir(
    n: usize,
    proportions: &Proportions,
    base: &AttentionConfig,
    seed: u64,
    out: &Path,
) -> Result<Manifest, HarnessError> {
    let cases = generate_corpus(n, proportions, base, seed)?;
    write_corpus(out, &cases, seed, Some(*proportions), base)
}

/// Diagnoses every case of a corpus directory against its oracle, in
/// manifest order.
pub fn diagnose_corpus(
    root: &Path,
    opts: &DiagnoseOptions,
) -> Result<Vec<(DiagnosisReport, FaultLabel)>, HarnessError> {
    let manifest = read_manifest(root)?;
    manifest
        .cases
        .par_iter()
        .map(|e| {
            let trace = load_trace(&trace_path(root, &e.case_id))?;
            let digest = config_digest(&trace.config);
            if digest != e.config_digest {
                return Err(HarnessError::DigestMismatch {
                    case_id: e.case_id.clone(),
                    found: digest,
                });
            }
            let op = oracle_path(root, &e.case_id);
            let oracle = if op.is_file() { Some(load_trace(&op)?) } else { None };
            let mut report = diagnose_with(&trace, oracle.as_ref(), opts)?;
            report.case_id = Some(e.case_id.clone());
            Ok((report, FaultLabel::of(e.root_cause)))
        })
        .collect()
}

pub fn evaluate_corpus(
    root: &Path,
    min_support: usize,
    opts: &DiagnoseOptions,
) -> Result<(MetricsReport, Vec<DiagnosisReport>), HarnessError> {
    let cases = diagnose_corpus(root, opts)?;
    let report = evaluate(&cases, min_support)?;
    Ok((report, cases.into_iter().map(|(r, _)| r).collect()))
}
