//! Versioned JSON input/output files and the CSV comparison table.
//!
//! Every JSON document carries a `schema` string naming its kind and version.
//! Parse failures name the file, the JSON path of the offending field, and
//! its line and column.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::costmodel::{CostBreakdown, LayerSpec, ModelSpec, ParallelPlan, DEFAULT_BATCH_CANDIDATES, DEFAULT_MICROBATCH_CANDIDATES};
use crate::error::{Error, Result};
use crate::grouping::Hierarchy;
use crate::planner::BeamTrace;
use crate::profiling::{DeviceSpec, LinkMeasurement};
use crate::schedule::PipelineTiming;
use crate::simulator::{SimReport, TraceRecord};

pub const CLUSTER_SCHEMA: &str = "geopipe.cluster/1";
pub const MODEL_SCHEMA: &str = "geopipe.model/1";
pub const TRACE_SCHEMA: &str = "geopipe.trace/1";
pub const PLAN_SCHEMA: &str = "geopipe.plan/1";
pub const HIERARCHY_SCHEMA: &str = "geopipe.hierarchy/1";
pub const COST_SCHEMA: &str = "geopipe.cost/1";
pub const SIM_SCHEMA: &str = "geopipe.sim/1";
pub const TIMING_SCHEMA: &str = "geopipe.timing/1";
pub const COMPARE_SCHEMA: &str = "geopipe.compare/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub schema: String,
    pub devices: Vec<DeviceSpec>,
    pub links: Vec<LinkMeasurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub fwd_flops: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bwd_input_flops: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bwd_weight_flops: Option<f64>,
    pub activation_out_bytes: f64,
    pub param_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: String,
    pub layers: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_candidates: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microbatch_candidates: Option<Vec<u32>>,
}

impl ModelFile {
    /// Missing backward costs default to the forward cost.
    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    fwd_flops: l.fwd_flops,
                    bwd_input_flops: l.bwd_input_flops.unwrap_or(l.fwd_flops),
                    bwd_weight_flops: l.bwd_weight_flops.unwrap_or(l.fwd_flops),
                    activation_out_bytes: l.activation_out_bytes,
                    param_bytes: l.param_bytes,
                })
                .collect(),
            batch_candidates: self.batch_candidates.clone().unwrap_or_else(|| DEFAULT_BATCH_CANDIDATES.to_vec()),
            microbatch_candidates: self
                .microbatch_candidates
                .clone()
                .unwrap_or_else(|| DEFAULT_MICROBATCH_CANDIDATES.to_vec()),
        }
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        Self {
            schema: MODEL_SCHEMA.into(),
            layers: spec
                .layers
                .iter()
                .map(|l| LayerRecord {
                    fwd_flops: l.fwd_flops,
                    bwd_input_flops: Some(l.bwd_input_flops),
                    bwd_weight_flops: Some(l.bwd_weight_flops),
                    activation_out_bytes: l.activation_out_bytes,
                    param_bytes: l.param_bytes,
                })
                .collect(),
            batch_candidates: Some(spec.batch_candidates.clone()),
            microbatch_candidates: Some(spec.microbatch_candidates.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFile {
    pub schema: String,
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema: String,
    pub plan: ParallelPlan,
    pub breakdown: CostBreakdown,
    pub objective: f64,
    #[serde(default)]
    pub traces: Vec<BeamTrace>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub schema: String,
    pub devices: Vec<String>,
    pub hierarchy: Hierarchy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFile {
    pub schema: String,
    pub plan: ParallelPlan,
    pub breakdown: CostBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFile {
    pub schema: String,
    pub report: SimReport,
}

/// Per-stage durations and boundary links given directly, bypassing the
/// cluster, model and plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimingFile {
    pub schema: String,
    pub timing: PipelineTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareFile {
    pub schema: String,
    pub rows: Vec<CompareRow>,
}

/// One row of the policy comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: String,
    pub adapter: bool,
    pub makespan_s: f64,
    pub throughput: f64,
    pub mean_bubble: f64,
    pub actions: usize,
}

#[derive(Deserialize)]
struct SchemaOnly {
    schema: Option<String>,
}

fn parse_error(path: &Path, field: &str, err: &serde_json::Error) -> Error {
    let field = if field.is_empty() || field == "." { "<root>" } else { field };
    Error::Parse {
        path: path.display().to_string(),
        message: format!("field `{field}` (line {}, column {}): {err}", err.line(), err.column()),
    }
}

/// Parses `text` as a `T` whose `schema` must equal `expected`.
pub fn parse_json<T: DeserializeOwned>(path: &Path, text: &str, expected: &str) -> Result<T> {
    let head: SchemaOnly = serde_json::from_str(text).map_err(|e| parse_error(path, "", &e))?;
    match head.schema.as_deref() {
        Some(s) if s == expected => {}
        Some(s) => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("field `schema`: expected `{expected}`, found `{s}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.display().to_string(),
                message: format!("field `schema`: missing (expected `{expected}`)"),
            })
        }
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        parse_error(path, &field, e.inner())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_json(path, &text, expected)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("document serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value))?;
    Ok(())
}

pub fn read_cluster(path: &Path) -> Result<ClusterFile> {
    read_json(path, CLUSTER_SCHEMA)
}

pub fn read_model(path: &Path) -> Result<ModelSpec> {
    let file: ModelFile = read_json(path, MODEL_SCHEMA)?;
    Ok(file.to_spec())
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    read_json(path, TRACE_SCHEMA)
}

pub fn read_plan(path: &Path) -> Result<PlanFile> {
    read_json(path, PLAN_SCHEMA)
}

pub fn read_timing(path: &Path) -> Result<PipelineTiming> {
    let file: TimingFile = read_json(path, TIMING_SCHEMA)?;
    file.timing.validate()?;
    Ok(file.timing)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_error(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compare_csv(path: &Path) -> Result<Vec<CompareRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize().collect::<std::result::Result<Vec<CompareRow>, _>>().map_err(csv_error(path))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}
