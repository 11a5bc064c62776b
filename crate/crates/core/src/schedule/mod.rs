//! Pipeline operation timelines.
//!
//! A single event-driven list scheduler ([`engine`]) drives every policy; the
//! policies differ only in which ready op an idle stage picks next. Work moves
//! as sample ranges: stage 0 starts each iteration with the whole batch and
//! cuts micro-batches off its front, later stages cut what they receive down
//! to their own micro-batch size but never merge pieces.

pub mod engine;
pub mod timeline;
pub mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{run_engine, Controller, EngineEvent, FixedSize, LinkModel, StaticLinks};
pub use validate::{validate_schedule, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Forward,
    Backward,
    WeightUpdate,
    WeightSync,
    OptimizerStep,
}

impl OpKind {
    pub fn short(self) -> &'static str {
        match self {
            OpKind::Forward => "F",
            OpKind::Backward => "B",
            OpKind::WeightUpdate => "W",
            OpKind::WeightSync => "Sync",
            OpKind::OptimizerStep => "Opt",
        }
    }

    pub fn is_micro(self) -> bool {
        matches!(self, OpKind::Forward | OpKind::Backward | OpKind::WeightUpdate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeOp {
    pub kind: OpKind,
    pub stage: usize,
    pub iteration: usize,
    /// Per (stage, iteration, kind) sequence number; absent for Sync/Optimizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub microbatch: Option<u32>,
    /// Half-open sample range within the iteration's batch.
    pub samples: [u32; 2],
    pub start: f64,
    pub end: f64,
}

impl PipeOp {
    pub fn size(&self) -> u32 {
        self.samples[1] - self.samples[0]
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn label(&self) -> String {
        match self.microbatch {
            Some(k) => format!("{}{}", self.kind.short(), k),
            None => self.kind.short().to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Activations from stage `link` to `link + 1`.
    Forward,
    /// Gradients from stage `link + 1` to `link`.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub link: usize,
    pub direction: Direction,
    pub iteration: usize,
    pub samples: [u32; 2],
    pub start: f64,
    pub end: f64,
}

impl TransferRecord {
    pub fn size(&self) -> u32 {
        self.samples[1] - self.samples[0]
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Stage whose op produced the payload.
    pub fn source_stage(&self) -> usize {
        match self.direction {
            Direction::Forward => self.link,
            Direction::Backward => self.link + 1,
        }
    }

    pub fn target_stage(&self) -> usize {
        match self.direction {
            Direction::Forward => self.link + 1,
            Direction::Backward => self.link,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Policy {
    Gpipe,
    OneFOneB,
    ZbOriginal,
    ZbCompact,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Gpipe, Policy::OneFOneB, Policy::ZbOriginal, Policy::ZbCompact];

    /// GPIPE and 1F1B run the weight gradient right after the input gradient.
    pub fn fuses_weight(self) -> bool {
        matches!(self, Policy::Gpipe | Policy::OneFOneB)
    }

    pub fn name(self) -> &'static str {
        match self {
            Policy::Gpipe => "GPIPE",
            Policy::OneFOneB => "ONE_F_ONE_B",
            Policy::ZbOriginal => "ZB_ORIGINAL",
            Policy::ZbCompact => "ZB_COMPACT",
        }
    }

    /// Name used in reports; ZB_ORIGINAL is an approximation of the published
    /// variant and says so.
    pub fn report_label(self) -> &'static str {
        match self {
            Policy::ZbOriginal => "ZB_ORIGINAL (stand-in)",
            p => p.name(),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        match norm.as_str() {
            "GPIPE" => Ok(Policy::Gpipe),
            "ONE_F_ONE_B" | "1F1B" => Ok(Policy::OneFOneB),
            "ZB_ORIGINAL" => Ok(Policy::ZbOriginal),
            "ZB_COMPACT" => Ok(Policy::ZbCompact),
            _ => Err(format!(
                "unknown policy `{s}` (expected GPIPE, ONE_F_ONE_B, ZB_ORIGINAL or ZB_COMPACT)"
            )),
        }
    }
}

/// Durations for one full micro-batch of the configured size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub forward: f64,
    pub backward: f64,
    pub weight: f64,
    pub sync: f64,
    pub optimizer: f64,
}

impl StageTiming {
    pub fn compute(forward: f64, backward: f64, weight: f64) -> Self {
        Self {
            forward,
            backward,
            weight,
            sync: 0.0,
            optimizer: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTiming {
    pub latency: f64,
    pub bandwidth: f64,
    pub bytes_per_sample: f64,
}

impl LinkTiming {
    /// Link whose full transfer of `microbatch` samples takes `seconds`.
    pub fn from_seconds(seconds: f64, microbatch: u32) -> Self {
        Self {
            latency: 0.0,
            bandwidth: 1.0,
            bytes_per_sample: seconds / microbatch as f64,
        }
    }

    pub fn bytes(&self, samples: u32) -> f64 {
        samples as f64 * self.bytes_per_sample
    }

    pub fn transfer_time(&self, samples: u32) -> f64 {
        self.latency + self.bytes(samples) / self.bandwidth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub batch: u32,
    pub microbatch: u32,
    pub stages: Vec<StageTiming>,
    /// `links[i]` joins stage `i` and `i + 1`.
    pub links: Vec<LinkTiming>,
}

impl PipelineTiming {
    /// Identical stages and links; convenient for fixtures.
    pub fn uniform(stages: usize, f: f64, b: f64, w: f64, transfer: f64, batch: u32, microbatch: u32) -> Self {
        Self {
            batch,
            microbatch,
            stages: vec![StageTiming::compute(f, b, w); stages],
            links: vec![LinkTiming::from_seconds(transfer, microbatch); stages.saturating_sub(1)],
        }
    }

    pub fn micro_count(&self) -> u32 {
        self.batch / self.microbatch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTiming(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        if self.links.len() + 1 != self.stages.len() {
            return bad(format!("{} stages need {} links, got {}", self.stages.len(), self.stages.len() - 1, self.links.len()));
        }
        if self.microbatch == 0 || self.batch == 0 || self.batch % self.microbatch != 0 {
            return bad(format!("micro-batch {} must divide batch {}", self.microbatch, self.batch));
        }
        for (i, s) in self.stages.iter().enumerate() {
            for (name, v) in [
                ("forward", s.forward),
                ("backward", s.backward),
                ("weight", s.weight),
                ("sync", s.sync),
                ("optimizer", s.optimizer),
            ] {
                if !(v >= 0.0) || !v.is_finite() {
                    return bad(format!("stage {i} {name} duration must be finite and non-negative, got {v}"));
                }
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            if !(l.latency >= 0.0) || !l.latency.is_finite() || !(l.bandwidth > 0.0) || !l.bandwidth.is_finite() || !(l.bytes_per_sample >= 0.0) || !l.bytes_per_sample.is_finite() {
                return bad(format!("link {i} parameters invalid: {l:?}"));
            }
        }
        Ok(())
    }

    /// Duration of a `kind` op over `size` samples on `stage`.
    pub fn duration(&self, stage: usize, kind: OpKind, size: u32) -> f64 {
        let st = &self.stages[stage];
        let base = match kind {
            OpKind::Forward => st.forward,
            OpKind::Backward => st.backward,
            OpKind::WeightUpdate => st.weight,
            OpKind::WeightSync => return st.sync,
            OpKind::OptimizerStep => return st.optimizer,
        };
        if size == self.microbatch {
            base
        } else {
            base * (size as f64 / self.microbatch as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub iterations: usize,
    /// Let an iteration's forwards start before the previous optimizer step.
    pub async_iterations: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            async_iterations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub policy: Policy,
    pub batch: u32,
    pub microbatch: u32,
    pub iterations: usize,
    pub async_iterations: bool,
    /// Ops per stage in start order.
    pub stages: Vec<Vec<PipeOp>>,
    pub transfers: Vec<TransferRecord>,
    pub makespan: f64,
}

impl Schedule {
    pub fn ops(&self) -> impl Iterator<Item = &PipeOp> {
        self.stages.iter().flatten()
    }

    pub fn busy_time(&self, stage: usize) -> f64 {
        self.stages[stage].iter().map(PipeOp::duration).sum()
    }

    /// Ops of one kind on one stage, in start order.
    pub fn ops_of(&self, stage: usize, kind: OpKind) -> impl Iterator<Item = &PipeOp> {
        self.stages[stage].iter().filter(move |o| o.kind == kind)
    }
}

pub fn generate_schedule(timing: &PipelineTiming, policy: Policy, config: &ScheduleConfig) -> Result<Schedule> {
    let mut sizes = FixedSize(timing.microbatch);
    run_engine(timing, policy, config, &StaticLinks(timing), &mut sizes)
}

/// Idle share of the makespan per stage.
pub fn bubble_fraction(schedule: &Schedule) -> Vec<f64> {
    (0..schedule.stages.len())
        .map(|s| {
            if schedule.makespan > 0.0 {
                ((schedule.makespan - schedule.busy_time(s)) / schedule.makespan).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn mean_bubble_fraction(schedule: &Schedule) -> f64 {
    let b = bubble_fraction(schedule);
    b.iter().sum::<f64>() / b.len() as f64
}
