//! Trace-event JSON export, viewable in chrome://tracing or Perfetto.
//! Compute ops live in process 0 with one thread per stage; transfers live in
//! process 1 with one thread per link direction.

use serde::{Deserialize, Serialize};

use super::{Direction, OpKind, PipeOp, Schedule, TransferRecord};
use crate::error::{Error, Result};

pub const TIMELINE_SCHEMA: &str = "geopipe.timeline/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    pub cat: String,
    pub ph: String,
    /// Microseconds.
    pub ts: f64,
    pub dur: f64,
    pub pid: u32,
    pub tid: u32,
    pub args: TraceArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceArgs {
    pub iteration: usize,
    pub samples: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microbatch: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceFile {
    pub trace_events: Vec<TraceEvent>,
    pub display_time_unit: String,
    pub other_data: TraceMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema: String,
    pub policy: String,
    pub makespan_s: f64,
}

const US: f64 = 1e6;

fn kind_name(k: OpKind) -> &'static str {
    match k {
        OpKind::Forward => "Forward",
        OpKind::Backward => "Backward",
        OpKind::WeightUpdate => "WeightUpdate",
        OpKind::WeightSync => "WeightSync",
        OpKind::OptimizerStep => "OptimizerStep",
    }
}

fn kind_from(name: &str) -> Option<OpKind> {
    Some(match name {
        "Forward" => OpKind::Forward,
        "Backward" => OpKind::Backward,
        "WeightUpdate" => OpKind::WeightUpdate,
        "WeightSync" => OpKind::WeightSync,
        "OptimizerStep" => OpKind::OptimizerStep,
        _ => return None,
    })
}

pub fn to_trace(s: &Schedule) -> TraceFile {
    let mut events: Vec<TraceEvent> = s
        .ops()
        .map(|o| TraceEvent {
            name: o.label(),
            cat: kind_name(o.kind).into(),
            ph: "X".into(),
            ts: o.start * US,
            dur: o.duration() * US,
            pid: 0,
            tid: o.stage as u32,
            args: TraceArgs {
                iteration: o.iteration,
                samples: o.samples,
                microbatch: o.microbatch,
            },
        })
        .collect();
    events.extend(s.transfers.iter().map(|t| {
        let (cat, dir) = match t.direction {
            Direction::Forward => ("Activation", 0),
            Direction::Backward => ("Gradient", 1),
        };
        TraceEvent {
            name: format!("{cat} {}-{}", t.samples[0], t.samples[1]),
            cat: cat.into(),
            ph: "X".into(),
            ts: t.start * US,
            dur: t.duration() * US,
            pid: 1,
            tid: (t.link * 2 + dir) as u32,
            args: TraceArgs {
                iteration: t.iteration,
                samples: t.samples,
                microbatch: None,
            },
        }
    }));
    TraceFile {
        trace_events: events,
        display_time_unit: "ms".into(),
        other_data: TraceMeta {
            schema: TIMELINE_SCHEMA.into(),
            policy: s.policy.name().into(),
            makespan_s: s.makespan,
        },
    }
}

pub fn to_trace_json(s: &Schedule) -> String {
    serde_json::to_string_pretty(&to_trace(s)).expect("trace serializes")
}

/// Compute ops and transfers recovered from an exported trace.
pub fn from_trace(file: &TraceFile) -> Result<(Vec<PipeOp>, Vec<TransferRecord>)> {
    if file.other_data.schema != TIMELINE_SCHEMA {
        return Err(Error::Parse {
            path: "otherData.schema".into(),
            message: format!("expected `{TIMELINE_SCHEMA}`, found `{}`", file.other_data.schema),
        });
    }
    let mut ops = Vec::new();
    let mut transfers = Vec::new();
    for (i, e) in file.trace_events.iter().enumerate() {
        let (start, end) = (e.ts / US, (e.ts + e.dur) / US);
        match e.pid {
            0 => ops.push(PipeOp {
                kind: kind_from(&e.cat).ok_or_else(|| Error::Parse {
                    path: format!("traceEvents[{i}].cat"),
                    message: format!("unknown op kind `{}`", e.cat),
                })?,
                stage: e.tid as usize,
                iteration: e.args.iteration,
                microbatch: e.args.microbatch,
                samples: e.args.samples,
                start,
                end,
            }),
            1 => transfers.push(TransferRecord {
                link: e.tid as usize / 2,
                direction: if e.tid % 2 == 0 {
                    Direction::Forward
                } else {
                    Direction::Backward
                },
                iteration: e.args.iteration,
                samples: e.args.samples,
                start,
                end,
            }),
            p => {
                return Err(Error::Parse {
                    path: format!("traceEvents[{i}].pid"),
                    message: format!("unexpected process id {p}"),
                })
            }
        }
    }
    Ok((ops, transfers))
}
