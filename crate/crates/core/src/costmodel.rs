//! Per-stage pipeline cost estimate.
//!
//! For stage `s` with pipeline predecessors `i < s`:
//!
//! ```text
//! cost(s) = sum_i t_f(i) + B * t_c(s) + sum_i t_l(i) + AL(s)
//! ```
//!
//! where `t_c` is one micro-batch of forward + input-gradient + weight-gradient
//! compute, `t_f(i) = t_c(i) + transfer(i -> i+1)`, `t_l(i)` is the part of
//! that transfer the successor's compute cannot hide, `B` is the number of
//! micro-batches per iteration and `AL` the intra-group gradient/activation
//! synchronization time. A plan costs the maximum over its stages.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{FirstLevelGroup, Hierarchy};
use crate::profiling::ClusterTopology;
use crate::schedule::{LinkTiming, PipelineTiming, StageTiming};

/// Per-sample costs of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub fwd_flops: f64,
    pub bwd_input_flops: f64,
    pub bwd_weight_flops: f64,
    pub activation_out_bytes: f64,
    pub param_bytes: f64,
}

impl LayerSpec {
    /// Backward input and weight passes each cost one forward.
    pub fn symmetric(fwd_flops: f64, activation_out_bytes: f64, param_bytes: f64) -> Self {
        Self {
            fwd_flops,
            bwd_input_flops: fwd_flops,
            bwd_weight_flops: fwd_flops,
            activation_out_bytes,
            param_bytes,
        }
    }

    pub fn total_flops(&self) -> f64 {
        self.fwd_flops + self.bwd_input_flops + self.bwd_weight_flops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub batch_candidates: Vec<u32>,
    pub microbatch_candidates: Vec<u32>,
}

pub const DEFAULT_BATCH_CANDIDATES: [u32; 2] = [128, 256];
pub const DEFAULT_MICROBATCH_CANDIDATES: [u32; 3] = [8, 16, 32];

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self {
            layers,
            batch_candidates: DEFAULT_BATCH_CANDIDATES.to_vec(),
            microbatch_candidates: DEFAULT_MICROBATCH_CANDIDATES.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let fields = [
                ("fwd_flops", l.fwd_flops),
                ("bwd_input_flops", l.bwd_input_flops),
                ("bwd_weight_flops", l.bwd_weight_flops),
                ("activation_out_bytes", l.activation_out_bytes),
                ("param_bytes", l.param_bytes),
            ];
            for (name, v) in fields {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidModel(format!("layers[{i}].{name} must be non-negative, got {v}")));
                }
            }
            if !(l.total_flops() > 0.0) {
                return Err(Error::InvalidModel(format!("layers[{i}] has no compute")));
            }
        }
        if self.batch_candidates.is_empty() || self.microbatch_candidates.is_empty() {
            return Err(Error::InvalidModel("batch and micro-batch candidate lists must be non-empty".into()));
        }
        if self.batch_candidates.contains(&0) || self.microbatch_candidates.contains(&0) {
            return Err(Error::InvalidModel("batch sizes must be positive".into()));
        }
        Ok(())
    }

    fn sum(&self, range: LayerRange, f: impl Fn(&LayerSpec) -> f64) -> f64 {
        self.layers[range.start..range.end].iter().map(f).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStage {
    pub sg: usize,
    pub layers: LayerRange,
}

/// One rectangle of a `[rows, cols]` tensor owned by one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub unit: usize,
    pub grid_row: usize,
    pub grid_col: usize,
    pub offset: [f64; 2],
    pub extent: [f64; 2],
}

impl Tile {
    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }
}

/// How a stage's work is spread over the second-level groups of its FG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntraSplit {
    /// The FG acts as one symmetric data-parallel unit.
    Uniform,
    /// Consecutive layer sub-ranges per SG, in SG order.
    AsymmetricPp { parts: Vec<SubStage> },
    /// Data fractions per SG, in SG order.
    AsymmetricDp {
        fractions: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fallback: Option<String>,
    },
    /// Tiles of the unit square per device; `unit` is a topology device index.
    AsymmetricTpDp { grid: [usize; 2], tiles: Vec<Tile> },
}

impl IntraSplit {
    pub fn label(&self) -> &'static str {
        match self {
            IntraSplit::Uniform => "uniform",
            IntraSplit::AsymmetricPp { .. } => "asym-pp",
            IntraSplit::AsymmetricDp { .. } => "asym-dp",
            IntraSplit::AsymmetricTpDp { .. } => "asym-tp-dp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAssignment {
    pub fg: usize,
    pub layers: LayerRange,
    pub split: IntraSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub stages: Vec<StageAssignment>,
    pub batch: u32,
    pub microbatch: u32,
}

impl ParallelPlan {
    pub fn micro_count(&self) -> u32 {
        self.batch / self.microbatch
    }

    pub fn validate(&self, layer_count: usize, fg_count: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidPlan("plan has no stages".into()));
        }
        if self.microbatch == 0 || self.batch == 0 || self.batch % self.microbatch != 0 {
            return Err(Error::InvalidPlan(format!(
                "micro-batch {} must divide batch {}",
                self.microbatch, self.batch
            )));
        }
        let mut next = 0;
        let mut seen = vec![false; fg_count];
        for (s, st) in self.stages.iter().enumerate() {
            if st.layers.start != next || st.layers.is_empty() {
                return Err(Error::InvalidPlan(format!("stage {s} range {} does not continue at {next}", st.layers)));
            }
            next = st.layers.end;
            if st.fg >= fg_count || std::mem::replace(&mut seen[st.fg], true) {
                return Err(Error::InvalidPlan(format!("stage {s} uses unknown or repeated FG{}", st.fg)));
            }
        }
        if next != layer_count {
            return Err(Error::InvalidPlan(format!("stages cover {next} of {layer_count} layers")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub fill_seconds: f64,
    pub run_seconds: f64,
    pub residual_seconds: f64,
    pub collective_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub stages: Vec<StageCost>,
    pub micro_count: f64,
    /// Max over stage totals; infinite when the plan violates memory limits.
    pub plan_cost: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CostBreakdown {
    pub fn feasible(&self) -> bool {
        self.plan_cost.is_finite()
    }
}

/// Scalar per-stage inputs of the cost formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTerms {
    /// `t_c`: one micro-batch of compute.
    pub compute: f64,
    /// Activation transfer to the next stage (0 for the last stage).
    pub transfer_out: f64,
    /// `AL`.
    pub collective: f64,
}

pub fn residual_latency(t_comm: f64, t_lap: f64) -> f64 {
    (t_comm - t_lap).max(0.0)
}

pub fn evaluate_terms(terms: &[StageTerms], micro_count: f64) -> CostBreakdown {
    let mut stages = Vec::with_capacity(terms.len());
    let mut fill = 0.0;
    let mut residual = 0.0;
    for (s, t) in terms.iter().enumerate() {
        if s > 0 {
            let prev = &terms[s - 1];
            fill += prev.compute + prev.transfer_out;
            residual += residual_latency(prev.transfer_out, t.compute);
        }
        let run = micro_count * t.compute;
        stages.push(StageCost {
            fill_seconds: fill,
            run_seconds: run,
            residual_seconds: residual,
            collective_seconds: t.collective,
            total_seconds: fill + run + residual + t.collective,
        });
    }
    let plan_cost = stages.iter().map(|c| c.total_seconds).fold(0.0, f64::max);
    CostBreakdown {
        stages,
        micro_count,
        plan_cost,
        warnings: Vec::new(),
    }
}

/// `AL = V / min intra-group bandwidth`; zero for singleton groups.
pub fn intra_group_comm(volume_bytes: f64, fg: &FirstLevelGroup) -> Result<f64> {
    if volume_bytes == 0.0 || fg.members.len() < 2 {
        return Ok(0.0);
    }
    match fg.min_intra_bandwidth {
        Some(bw) if bw > 0.0 => Ok(volume_bytes / bw),
        _ => Err(Error::InvalidTopology(format!("FG{} has zero intra-group bandwidth", fg.id))),
    }
}

/// Everything the cost model needs besides the plan itself.
#[derive(Debug, Clone, Copy)]
pub struct CostContext<'a> {
    pub topology: &'a ClusterTopology,
    pub hierarchy: &'a Hierarchy,
    pub model: &'a ModelSpec,
}

impl<'a> CostContext<'a> {
    pub fn new(topology: &'a ClusterTopology, hierarchy: &'a Hierarchy, model: &'a ModelSpec) -> Self {
        Self {
            topology,
            hierarchy,
            model,
        }
    }

    /// Capacity the stage's work is divided by, given its intra-group split.
    pub fn effective_capacity(&self, stage: &StageAssignment) -> Result<f64> {
        let fg = self.hierarchy.fg(stage.fg);
        let cap = match &stage.split {
            IntraSplit::AsymmetricPp { parts } => {
                let sgs = self.hierarchy.sgs(stage.fg);
                let total = self.model.sum(stage.layers, LayerSpec::total_flops);
                let mut slowest: f64 = 0.0;
                for part in parts {
                    let sg_cap = sgs
                        .get(part.sg)
                        .map(|sg| sg.aggregate_capacity)
                        .ok_or_else(|| Error::InvalidPlan(format!("FG{} has no SG{}", stage.fg, part.sg)))?;
                    if !(sg_cap > 0.0) {
                        return Err(Error::DegenerateGroup {
                            group: format!("FG{}.SG{}", stage.fg, part.sg),
                            reason: "zero compute capacity".into(),
                        });
                    }
                    slowest = slowest.max(self.model.sum(part.layers, LayerSpec::total_flops) / sg_cap);
                }
                if slowest > 0.0 {
                    total / slowest
                } else {
                    fg.aggregate_capacity
                }
            }
            _ => fg.aggregate_capacity,
        };
        if !(cap > 0.0) {
            return Err(Error::DegenerateGroup {
                group: format!("FG{}", fg.id),
                reason: "zero compute capacity".into(),
            });
        }
        Ok(cap)
    }

    /// Forward, input-gradient and weight-gradient seconds for one micro-batch.
    pub fn phase_times(&self, plan: &ParallelPlan, s: usize) -> Result<[f64; 3]> {
        let stage = &plan.stages[s];
        let cap = self.effective_capacity(stage)?;
        let m = plan.microbatch as f64;
        Ok([
            self.model.sum(stage.layers, |l| l.fwd_flops) * m / cap,
            self.model.sum(stage.layers, |l| l.bwd_input_flops) * m / cap,
            self.model.sum(stage.layers, |l| l.bwd_weight_flops) * m / cap,
        ])
    }

    /// `t_c` of stage `s`.
    pub fn stage_compute_time(&self, plan: &ParallelPlan, s: usize) -> Result<f64> {
        let stage = &plan.stages[s];
        let cap = self.effective_capacity(stage)?;
        Ok(self.model.sum(stage.layers, LayerSpec::total_flops) * plan.microbatch as f64 / cap)
    }

    /// Device pair carrying traffic between two FGs: the lowest `p_t` across
    /// them, ties to the smallest indices.
    pub fn gateway(&self, from_fg: usize, to_fg: usize) -> (usize, usize) {
        let a = &self.hierarchy.fg(from_fg).members;
        let b = &self.hierarchy.fg(to_fg).members;
        let mut best = (a[0], b[0]);
        for &u in a {
            for &v in b {
                if self.topology.p_t(u, v) < self.topology.p_t(best.0, best.1) {
                    best = (u, v);
                }
            }
        }
        best
    }

    /// Link parameters between stage `s` and `s + 1`.
    pub fn boundary_link(&self, plan: &ParallelPlan, s: usize) -> LinkTiming {
        let (u, v) = self.gateway(plan.stages[s].fg, plan.stages[s + 1].fg);
        let link = self.topology.link(u, v);
        LinkTiming {
            latency: link.latency_s,
            bandwidth: link.bandwidth_bps,
            bytes_per_sample: self.model.layers[plan.stages[s].layers.end - 1].activation_out_bytes,
        }
    }

    /// Synchronization volume `V`: a gradient ring over the stage's
    /// parameters, plus the boundary activation when tensors are split.
    pub fn collective_volume(&self, plan: &ParallelPlan, s: usize) -> f64 {
        let stage = &plan.stages[s];
        let params = self.model.sum(stage.layers, |l| l.param_bytes);
        let tp = match stage.split {
            IntraSplit::AsymmetricTpDp { .. } => {
                self.model.layers[stage.layers.end - 1].activation_out_bytes * plan.microbatch as f64
            }
            _ => 0.0,
        };
        2.0 * params + tp
    }

    pub fn collective_time(&self, plan: &ParallelPlan, s: usize) -> Result<f64> {
        intra_group_comm(self.collective_volume(plan, s), self.hierarchy.fg(plan.stages[s].fg))
    }

    /// Devices whose share of the stage parameters exceeds their memory.
    pub fn memory_violations(&self, plan: &ParallelPlan) -> Vec<String> {
        let mut out = Vec::new();
        for (s, stage) in plan.stages.iter().enumerate() {
            let params = self.model.sum(stage.layers, |l| l.param_bytes);
            let mut check = |device: usize, need: f64| {
                let have = self.topology.device(device).spec.memory_bytes as f64;
                if need > have {
                    out.push(format!(
                        "stage {s}: device {} needs {need:.0} B of parameters but has {have:.0} B",
                        self.topology.id(device)
                    ));
                }
            };
            match &stage.split {
                IntraSplit::AsymmetricPp { parts } => {
                    let sgs = self.hierarchy.sgs(stage.fg);
                    for part in parts {
                        let need = self.model.sum(part.layers, |l| l.param_bytes);
                        for &d in &sgs[part.sg].members {
                            check(d, need);
                        }
                    }
                }
                IntraSplit::AsymmetricTpDp { tiles, .. } => {
                    for tile in tiles {
                        check(tile.unit, params * tile.extent[1]);
                    }
                }
                IntraSplit::Uniform | IntraSplit::AsymmetricDp { .. } => {
                    for &d in &self.hierarchy.fg(stage.fg).members {
                        check(d, params);
                    }
                }
            }
        }
        out
    }

    pub fn stage_terms(&self, plan: &ParallelPlan) -> Result<Vec<StageTerms>> {
        let n = plan.stages.len();
        let mut terms = Vec::with_capacity(n);
        for s in 0..n {
            let transfer_out = if s + 1 < n {
                self.boundary_link(plan, s).transfer_time(plan.microbatch)
            } else {
                0.0
            };
            terms.push(StageTerms {
                compute: self.stage_compute_time(plan, s)?,
                transfer_out,
                collective: self.collective_time(plan, s)?,
            });
        }
        Ok(terms)
    }

    pub fn stage_cost(&self, plan: &ParallelPlan, s: usize) -> Result<StageCost> {
        let terms = self.stage_terms(plan)?;
        Ok(evaluate_terms(&terms, plan.micro_count() as f64).stages[s])
    }

    pub fn plan_cost(&self, plan: &ParallelPlan) -> Result<CostBreakdown> {
        plan.validate(self.model.layers.len(), self.hierarchy.first_level.len())?;
        let terms = self.stage_terms(plan)?;
        let mut breakdown = evaluate_terms(&terms, plan.micro_count() as f64);
        let violations = self.memory_violations(plan);
        if !violations.is_empty() {
            breakdown.plan_cost = f64::INFINITY;
            breakdown.warnings = violations;
        }
        Ok(breakdown)
    }

    /// Per-stage durations and boundary links for the scheduler/simulator,
    /// consistent with the terms used by [`CostContext::plan_cost`].
    pub fn pipeline_timing(&self, plan: &ParallelPlan, optimizer_seconds: f64) -> Result<PipelineTiming> {
        plan.validate(self.model.layers.len(), self.hierarchy.first_level.len())?;
        let n = plan.stages.len();
        let mut stages = Vec::with_capacity(n);
        for s in 0..n {
            let [forward, backward, weight] = self.phase_times(plan, s)?;
            stages.push(StageTiming {
                forward,
                backward,
                weight,
                sync: self.collective_time(plan, s)?,
                optimizer: optimizer_seconds,
            });
        }
        let links = (0..n.saturating_sub(1)).map(|s| self.boundary_link(plan, s)).collect();
        let timing = PipelineTiming {
            batch: plan.batch,
            microbatch: plan.microbatch,
            stages,
            links,
        };
        timing.validate()?;
        Ok(timing)
    }
}
