//! Corpus directories: `manifest.json` plus `cases/<case_id>/` holding the
//! faulty trace, the clean oracle trace and the label.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::trace_io::{read_trace, write_trace};
use super::{io_err, HarnessError};
use crate::engine::{AttentionConfig, RunTrace};
use crate::inject::{InjectedCase, Proportions};
use crate::taxonomy::{FaultCategory, Heuristic, Observability, RootCause};

pub const MANIFEST_SCHEMA: &str = "manifest_schema_v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of the config's JSON form.
pub fn config_digest(config: &AttentionConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serialises");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub root_cause: RootCause,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proportions: Option<Proportions>,
    pub base_config: AttentionConfig,
    pub cases: Vec<ManifestEntry>,
}

/// Ground-truth file written next to each case's traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub case_id: String,
    pub category: FaultCategory,
    pub root_cause: RootCause,
    pub expected_observability: Observability,
    pub expected_heuristic: Option<Heuristic>,
}

pub fn case_dir(root: &Path, case_id: &str) -> PathBuf {
    root.join("cases").join(case_id)
}

pub fn trace_path(root: &Path, case_id: &str) -> PathBuf {
    case_dir(root, case_id).join("trace.jsonl")
}

pub fn oracle_path(root: &Path, case_id: &str) -> PathBuf {
    case_dir(root, case_id).join("oracle.jsonl")
}

pub fn label_path(root: &Path, case_id: &str) -> PathBuf {
    case_dir(root, case_id).join("label.json")
}

pub fn save_trace(trace: &RunTrace, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_trace(trace, BufWriter::new(f))
}

pub fn load_trace(path: &Path) -> Result<RunTrace, HarnessError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_trace(BufReader::new(f)).map_err(|e| match e {
        HarnessError::Trace(m) => HarnessError::Trace(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes every case under `root` and returns the manifest, which is
/// also saved as `root/manifest.json`.
pub fn write_corpus(
    root: &Path,
    cases: &[InjectedCase],
    seed: u64,
    proportions: Option<Proportions>,
    base_config: &AttentionConfig,
) -> Result<Manifest, HarnessError> {
    let mut entries = Vec::with_capacity(cases.len());
    for c in cases {
        save_trace(&c.trace, &trace_path(root, &c.case_id))?;
        save_trace(&c.oracle, &oracle_path(root, &c.case_id))?;
        write_json(
            &LabelFile {
                case_id: c.case_id.clone(),
                category: c.label.category,
                root_cause: c.label.root_cause,
                expected_observability: c.expected_observability,
                expected_heuristic: c.expected_heuristic,
            },
            &label_path(root, &c.case_id),
        )?;
        entries.push(ManifestEntry {
            case_id: c.case_id.clone(),
            root_cause: c.label.root_cause,
            seed: c.seed,
            config_digest: config_digest(&c.trace.config),
        });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        seed,
        proportions,
        base_config: base_config.clone(),
        cases: entries,
    };
    write_json(&manifest, &root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest, HarnessError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(HarnessError::EmptyCorpus(root.to_path_buf()));
    }
    let m: Manifest = read_json(&path)?;
    if m.schema != MANIFEST_SCHEMA {
        return Err(HarnessError::Schema {
            found: m.schema,
            expected: MANIFEST_SCHEMA,
        });
    }
    if m.cases.is_empty() {
        return Err(HarnessError::EmptyCorpus(root.to_path_buf()));
    }
    let missing: Vec<String> = m
        .cases
        .iter()
        .filter(|e| !trace_path(root, &e.case_id).is_file())
        .map(|e| e.case_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingTraces(missing));
    }
    Ok(m)
}
