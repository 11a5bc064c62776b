//! Plan execution under a time-varying network.
//!
//! The simulator reuses the schedule engine; it swaps the static link model
//! for one that integrates bytes over a piecewise-constant bandwidth trace and
//! optionally plugs in the adaptive micro-batch controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterAction, AdapterConfig, AdaptiveController};
use crate::error::{Error, Result};
use crate::schedule::{
    bubble_fraction, run_engine, Controller, Direction, EngineEvent, FixedSize, LinkModel, OpKind, PipelineTiming,
    Policy, Schedule, ScheduleConfig,
};

/// One bandwidth change: from `t` on, link bandwidth is `multiplier × base`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub link: usize,
    pub t: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkTrace {
    links: BTreeMap<usize, Vec<(f64, f64)>>,
}

impl NetworkTrace {
    pub fn constant() -> Self {
        Self::default()
    }

    pub fn new(records: &[TraceRecord]) -> Result<Self> {
        let mut links: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if !(r.t >= 0.0) || !r.t.is_finite() {
                return Err(Error::InvalidTrace(format!("record {i}: time must be finite and non-negative, got {}", r.t)));
            }
            if !(r.multiplier > 0.0) || !r.multiplier.is_finite() {
                return Err(Error::InvalidTrace(format!("record {i}: multiplier must be positive, got {}", r.multiplier)));
            }
            let points = links.entry(r.link).or_default();
            if points.last().is_some_and(|&(t, _)| r.t <= t) {
                return Err(Error::InvalidTrace(format!(
                    "record {i}: breakpoints on link {} must be strictly increasing in time",
                    r.link
                )));
            }
            points.push((r.t, r.multiplier));
        }
        Ok(Self { links })
    }

    /// Same multiplier schedule on every link in `links`.
    pub fn uniform(links: impl IntoIterator<Item = usize>, breakpoints: &[(f64, f64)]) -> Result<Self> {
        let records: Vec<TraceRecord> = links
            .into_iter()
            .flat_map(|link| breakpoints.iter().map(move |&(t, multiplier)| TraceRecord { link, t, multiplier }))
            .collect();
        Self::new(&records)
    }

    pub fn records(&self) -> Vec<TraceRecord> {
        self.links
            .iter()
            .flat_map(|(&link, pts)| pts.iter().map(move |&(t, multiplier)| TraceRecord { link, t, multiplier }))
            .collect()
    }

    pub fn validate_for(&self, link_count: usize) -> Result<()> {
        match self.links.keys().find(|&&l| l >= link_count) {
            Some(l) => Err(Error::InvalidTrace(format!("trace names link {l}, but the pipeline has {link_count} links"))),
            None => Ok(()),
        }
    }

    fn points(&self, link: usize) -> &[(f64, f64)] {
        self.links.get(&link).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn multiplier(&self, link: usize, t: f64) -> f64 {
        let pts = self.points(link);
        let i = pts.partition_point(|&(bt, _)| bt <= t);
        if i == 0 {
            1.0
        } else {
            pts[i - 1].1
        }
    }

    pub fn effective_bandwidth(&self, link: usize, t: f64, base: f64) -> f64 {
        base * self.multiplier(link, t)
    }

    /// Finish time of `bytes` sent from `start` (latency already paid).
    pub fn integrate(&self, link: usize, start: f64, bytes: f64, base: f64) -> f64 {
        let pts = self.points(link);
        let mut t = start;
        let mut remaining = bytes;
        let mut i = pts.partition_point(|&(bt, _)| bt <= t);
        loop {
            let rate = base * if i == 0 { 1.0 } else { pts[i - 1].1 };
            let end = t + remaining / rate;
            match pts.get(i) {
                Some(&(next, _)) if end > next => {
                    remaining -= (next - t) * rate;
                    t = next;
                    i += 1;
                }
                _ => return end,
            }
        }
    }
}

pub struct TraceLinks<'a> {
    pub timing: &'a PipelineTiming,
    pub trace: &'a NetworkTrace,
}

impl LinkModel for TraceLinks<'_> {
    fn transfer_end(&self, link: usize, _direction: Direction, start: f64, samples: u32) -> f64 {
        let l = &self.timing.links[link];
        self.trace.integrate(link, start + l.latency, l.bytes(samples), l.bandwidth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub iterations: usize,
    /// Leading iterations left out of the throughput window.
    pub warmup: usize,
    pub async_iterations: bool,
    pub adapter: AdapterConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            warmup: 1,
            async_iterations: false,
            adapter: AdapterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub policy: Policy,
    pub policy_label: String,
    pub adapter_enabled: bool,
    pub iterations: usize,
    pub warmup: usize,
    pub makespan: f64,
    /// Samples of the measured iterations over the measured window.
    pub throughput: f64,
    pub measured_samples: u64,
    pub measured_seconds: f64,
    pub bubbles: Vec<f64>,
    pub actions: Vec<AdapterAction>,
    pub observations: Vec<EngineEvent>,
    pub schedule: Schedule,
}

/// Forwards events to an inner controller and records them.
struct Recording<C> {
    inner: C,
    events: Vec<EngineEvent>,
}

impl<C: Controller> Controller for Recording<C> {
    fn size(&self, stage: usize, iteration: usize, kind: OpKind) -> u32 {
        self.inner.size(stage, iteration, kind)
    }

    fn observe(&mut self, event: &EngineEvent) {
        self.events.push(event.clone());
        self.inner.observe(event);
    }
}

pub fn simulate(
    timing: &PipelineTiming,
    policy: Policy,
    trace: &NetworkTrace,
    adapter_enabled: bool,
    config: &SimConfig,
) -> Result<SimReport> {
    timing.validate()?;
    trace.validate_for(timing.links.len())?;
    if config.iterations == 0 || config.warmup >= config.iterations {
        return Err(Error::InvalidTiming(format!(
            "need more iterations ({}) than warm-up iterations ({})",
            config.iterations, config.warmup
        )));
    }
    let sched_cfg = ScheduleConfig {
        iterations: config.iterations,
        async_iterations: config.async_iterations,
    };
    let links = TraceLinks { timing, trace };
    let (schedule, actions, observations) = if adapter_enabled {
        let mut ctl = Recording {
            inner: AdaptiveController::new(config.adapter.clone(), timing, config.iterations),
            events: Vec::new(),
        };
        let s = run_engine(timing, policy, &sched_cfg, &links, &mut ctl)?;
        (s, ctl.inner.into_actions(), ctl.events)
    } else {
        let mut ctl = Recording {
            inner: FixedSize(timing.microbatch),
            events: Vec::new(),
        };
        let s = run_engine(timing, policy, &sched_cfg, &links, &mut ctl)?;
        (s, Vec::new(), ctl.events)
    };
    let window_start = if config.warmup == 0 {
        0.0
    } else {
        schedule
            .ops()
            .filter(|o| o.kind == OpKind::OptimizerStep && o.iteration == config.warmup - 1)
            .map(|o| o.end)
            .fold(0.0, f64::max)
    };
    let measured_samples = timing.batch as u64 * (config.iterations - config.warmup) as u64;
    let measured_seconds = schedule.makespan - window_start;
    Ok(SimReport {
        policy,
        policy_label: policy.report_label().to_string(),
        adapter_enabled,
        iterations: config.iterations,
        warmup: config.warmup,
        makespan: schedule.makespan,
        throughput: if measured_seconds > 0.0 {
            measured_samples as f64 / measured_seconds
        } else {
            f64::INFINITY
        },
        measured_samples,
        measured_seconds,
        bubbles: bubble_fraction(&schedule),
        actions,
        observations,
        schedule,
    })
}

/// Per (stage, iteration) sample totals that differ from the batch, for
/// forward and backward work. Empty when every sample is processed once.
pub fn conservation_errors(schedule: &Schedule) -> Vec<String> {
    let mut out = Vec::new();
    for (s, ops) in schedule.stages.iter().enumerate() {
        for it in 0..schedule.iterations {
            for kind in [OpKind::Forward, OpKind::Backward] {
                let mut ranges: Vec<[u32; 2]> = ops
                    .iter()
                    .filter(|o| o.kind == kind && o.iteration == it)
                    .map(|o| o.samples)
                    .collect();
                ranges.sort();
                let total: u32 = ranges.iter().map(|r| r[1] - r[0]).sum();
                let disjoint = ranges.windows(2).all(|w| w[0][1] <= w[1][0]);
                if total != schedule.batch || !disjoint {
                    out.push(format!("stage {s} iteration {it} {kind:?}: {total} samples, disjoint={disjoint}"));
                }
            }
        }
    }
    out
}
