//! JSON-lines trace files: one header line, then one line per stage,
//! mask, dispatch and cache event, then a closing outcome line.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::HarnessError;
use crate::engine::{AttentionConfig, ErrorRecord, RunTrace, StageRecord, Tensor, TRACE_SCHEMA};
use crate::kernels::{DispatchEvent, KernelDescriptor, MemoryModel};
use crate::kvcache::CacheEvent;
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    case_id: Option<String>,
    config: AttentionConfig,
    padding: Option<Vec<u8>>,
    position_indices: Vec<usize>,
    position_limit: Option<usize>,
    kernel: Option<KernelDescriptor>,
    memory: Option<MemoryModel>,
    probe_results: BTreeMap<String, bool>,
    #[serde(with = "serde_util::real")]
    wall_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Outcome {
    raised_error: Option<ErrorRecord>,
    output: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(Box<Header>),
    Stage(StageRecord),
    Mask { tensor: Tensor },
    Dispatch(DispatchEvent),
    Cache(CacheEvent),
    Outcome(Box<Outcome>),
}

pub fn write_trace<W: Write>(trace: &RunTrace, mut w: W) -> Result<(), HarnessError> {
    let mut line = |r: &Record| -> Result<(), HarnessError> {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&Record::Header(Box::new(Header {
        schema: trace.schema.clone(),
        case_id: trace.case_id.clone(),
        config: trace.config.clone(),
        padding: trace.padding.clone(),
        position_indices: trace.position_indices.clone(),
        position_limit: trace.position_limit,
        kernel: trace.kernel.clone(),
        memory: trace.memory,
        probe_results: trace.probe_results.clone(),
        wall_cost: trace.wall_cost,
    })))?;
    for s in &trace.stages {
        line(&Record::Stage(s.clone()))?;
    }
    if let Some(m) = &trace.mask_snapshot {
        line(&Record::Mask { tensor: m.clone() })?;
    }
    for e in &trace.dispatch_events {
        line(&Record::Dispatch(e.clone()))?;
    }
    for e in &trace.cache_events {
        line(&Record::Cache(e.clone()))?;
    }
    line(&Record::Outcome(Box::new(Outcome {
        raised_error: trace.raised_error.clone(),
        output: trace.output.clone(),
    })))
}

pub fn trace_to_string(trace: &RunTrace) -> String {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}

pub fn read_trace<R: BufRead>(r: R) -> Result<RunTrace, HarnessError> {
    let mut trace: Option<RunTrace> = None;
    let mut closed = false;
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Trace(format!("line {}: {e}", n + 1)))?;
        if closed {
            return Err(HarnessError::Trace(format!("line {}: record after outcome", n + 1)));
        }
        let t = match (&mut trace, rec) {
            (None, Record::Header(h)) => {
                if h.schema != TRACE_SCHEMA {
                    return Err(HarnessError::Schema {
                        found: h.schema,
                        expected: TRACE_SCHEMA,
                    });
                }
                let mut t = RunTrace::new(h.config);
                t.case_id = h.case_id;
                t.padding = h.padding;
                t.position_indices = h.position_indices;
                t.position_limit = h.position_limit;
                t.kernel = h.kernel;
                t.memory = h.memory;
                t.probe_results = h.probe_results;
                t.wall_cost = h.wall_cost;
                trace = Some(t);
                continue;
            }
            (None, _) => return Err(HarnessError::Trace("first record must be the header".into())),
            (Some(_), Record::Header(_)) => {
                return Err(HarnessError::Trace(format!("line {}: second header", n + 1)))
            }
            (Some(t), rec) => (t, rec),
        };
        match t {
            (t, Record::Stage(s)) => t.stages.push(s),
            (t, Record::Mask { tensor }) => t.mask_snapshot = Some(tensor),
            (t, Record::Dispatch(e)) => t.dispatch_events.push(e),
            (t, Record::Cache(e)) => t.cache_events.push(e),
            (t, Record::Outcome(o)) => {
                t.raised_error = o.raised_error;
                t.output = o.output;
                closed = true;
            }
            (_, Record::Header(_)) => unreachable!("handled above"),
        }
    }
    match (trace, closed) {
        (Some(t), true) => Ok(t),
        (Some(_), false) => Err(HarnessError::Trace("trace has no outcome record".into())),
        (None, _) => Err(HarnessError::Trace("empty trace".into())),
    }
}

pub fn trace_from_str(s: &str) -> Result<RunTrace, HarnessError> {
    read_trace(s.as_bytes())
}
