//! Runtime micro-batch resizing.
//!
//! Every link direction feeds a [`MonitorWindow`] of per-sample transfer
//! latencies. A window that sees its recent mean rise well above its baseline
//! halves the micro-batch of the stage producing that traffic (the sender of
//! activations, or the sender of gradients); once the mean falls back near the
//! baseline the size doubles again. Two transient phase rules sit on top:
//! stages behind a slow link start each iteration at half size until the
//! pipeline is full, and once every forward of an iteration has finished the
//! remaining backward work runs at half size.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::schedule::{Controller, Direction, EngineEvent, OpKind, PipelineTiming};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub window: usize,
    pub degrade_factor: f64,
    pub recover_factor: f64,
    pub ema_alpha: f64,
    pub min_size: u32,
    /// Per-sample seconds on a stage's outgoing activation link above which
    /// it starts every iteration at half size; `None` disables the rule.
    #[serde(default)]
    pub fill_bound: Option<f64>,
    pub drain: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            window: 20,
            degrade_factor: 1.2,
            recover_factor: 1.05,
            ema_alpha: 0.05,
            min_size: 1,
            fill_bound: None,
            drain: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    Degraded,
    Recovered,
    Stable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Fill,
    Run,
    Drain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cause {
    Degraded,
    Recovered,
    Fill,
    Drain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterAction {
    pub time: f64,
    pub stage: usize,
    pub old_size: u32,
    pub new_size: u32,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorWindow {
    capacity: usize,
    alpha: f64,
    samples: VecDeque<f64>,
    baseline: Option<f64>,
    frozen: bool,
}

impl MonitorWindow {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        Self {
            capacity: capacity.max(1),
            alpha,
            samples: VecDeque::with_capacity(capacity + 1),
            baseline: None,
            frozen: false,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    /// Mean of the first full window, then an exponential moving average of
    /// the samples leaving the window.
    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.samples.iter().sum::<f64>() / self.samples.len() as f64)
    }

    /// Adds a per-sample latency (raw transfer seconds / micro-batch size).
    pub fn record(&mut self, normalized: f64) {
        self.samples.push_back(normalized);
        if self.samples.len() > self.capacity {
            let old = self.samples.pop_front().expect("over capacity");
            if let (Some(b), false) = (self.baseline, self.frozen) {
                self.baseline = Some((1.0 - self.alpha) * b + self.alpha * old);
            }
        }
        if self.baseline.is_none() && self.is_full() {
            self.baseline = self.mean();
        }
    }

    pub fn record_transfer(&mut self, seconds: f64, size: u32) {
        self.record(seconds / size.max(1) as f64);
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }
}

/// Compares a full window's mean against `reference` (degradation) and the
/// baseline (recovery); partial windows are always stable.
pub fn detect_fluctuation(window: &MonitorWindow, reference: f64, reduced: bool, config: &AdapterConfig) -> Signal {
    let (Some(mean), Some(baseline)) = (window.mean(), window.baseline()) else {
        return Signal::Stable;
    };
    if !window.is_full() {
        return Signal::Stable;
    }
    if mean > config.degrade_factor * reference {
        Signal::Degraded
    } else if reduced && mean < config.recover_factor * baseline {
        Signal::Recovered
    } else {
        Signal::Stable
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageBatchState {
    pub stage: usize,
    pub current: u32,
    pub configured: u32,
    pub phase: Phase,
}

/// New micro-batch size for a signal: halve on degradation (never below
/// `min_size`), undo one halving on recovery (never above the configured
/// size). On entering the drain phase, `Stable` also halves. Sizes stay on
/// the lattice `configured >> k`.
pub fn adjust(state: &StageBatchState, signal: Signal, min_size: u32) -> u32 {
    let floor = min_size.clamp(1, state.configured);
    match (signal, state.phase) {
        (Signal::Degraded, _) | (Signal::Stable, Phase::Drain) => (state.current / 2).max(floor),
        (Signal::Recovered, _) => {
            let mut up = state.configured;
            while up / 2 > state.current {
                up /= 2;
            }
            up
        }
        (Signal::Stable, _) => state.current,
    }
}

/// Starting size for the fill phase.
pub fn fill_size(configured: u32, poor_network: bool, min_size: u32) -> u32 {
    if poor_network {
        (configured / 2).max(min_size.max(1))
    } else {
        configured
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct WindowId {
    link: usize,
    backward: bool,
}

/// Adapter state driven by engine events; a pure function of the events seen.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    config: AdapterConfig,
    configured: u32,
    iterations: usize,
    sizes: Vec<u32>,
    poor: Vec<bool>,
    fwd: Vec<MonitorWindow>,
    bwd: Vec<MonitorWindow>,
    /// Per stage: windows that reduced it and the level they saw.
    reductions: Vec<Vec<(WindowId, f64)>>,
    pipeline_full: Vec<bool>,
    draining: Vec<bool>,
    log: Vec<AdapterAction>,
}

impl AdaptiveController {
    pub fn new(config: AdapterConfig, timing: &PipelineTiming, iterations: usize) -> Self {
        let n = timing.stages.len();
        let m = timing.microbatch;
        let poor = (0..n)
            .map(|s| {
                config.fill_bound.is_some_and(|bound| {
                    s + 1 < n && timing.links[s].transfer_time(m) / m as f64 > bound
                })
            })
            .collect();
        let mk = || (0..n.saturating_sub(1)).map(|_| MonitorWindow::new(config.window, config.ema_alpha)).collect();
        let mut ctl = Self {
            configured: m,
            iterations,
            sizes: vec![m; n],
            poor,
            fwd: mk(),
            bwd: mk(),
            reductions: vec![Vec::new(); n],
            pipeline_full: vec![false; iterations],
            draining: vec![false; iterations],
            log: Vec::new(),
            config,
        };
        ctl.log_fill(0.0);
        ctl
    }

    pub fn actions(&self) -> &[AdapterAction] {
        &self.log
    }

    pub fn into_actions(self) -> Vec<AdapterAction> {
        self.log
    }

    pub fn current_sizes(&self) -> &[u32] {
        &self.sizes
    }

    fn log_fill(&mut self, time: f64) {
        for s in 0..self.sizes.len() {
            if self.poor[s] {
                let new = fill_size(self.configured, true, self.config.min_size).min(self.sizes[s]);
                if new != self.sizes[s] {
                    self.log.push(AdapterAction {
                        time,
                        stage: s,
                        old_size: self.sizes[s],
                        new_size: new,
                        cause: Cause::Fill,
                    });
                }
            }
        }
    }

    fn state(&self, stage: usize, phase: Phase) -> StageBatchState {
        StageBatchState {
            stage,
            current: self.sizes[stage],
            configured: self.configured,
            phase,
        }
    }

    fn on_transfer(&mut self, rec: &crate::schedule::TransferRecord) {
        let id = WindowId {
            link: rec.link,
            backward: rec.direction == Direction::Backward,
        };
        let stage = rec.source_stage();
        let window = if id.backward { &mut self.bwd[rec.link] } else { &mut self.fwd[rec.link] };
        window.record_transfer(rec.duration(), rec.size());
        let mine = self.reductions[stage].iter().rposition(|(w, _)| *w == id);
        let reference = match (mine, window.baseline()) {
            (Some(i), _) => self.reductions[stage][i].1,
            (None, Some(b)) => b,
            (None, None) => return,
        };
        let signal = detect_fluctuation(window, reference, mine.is_some(), &self.config);
        let level = window.mean().unwrap_or(reference);
        let old = self.sizes[stage];
        let new = adjust(&self.state(stage, Phase::Run), signal, self.config.min_size);
        if new == old {
            return;
        }
        let window = if id.backward { &mut self.bwd[rec.link] } else { &mut self.fwd[rec.link] };
        window.clear();
        let cause = match signal {
            Signal::Degraded => {
                window.set_frozen(true);
                self.reductions[stage].push((id, level));
                Cause::Degraded
            }
            Signal::Recovered => {
                let i = mine.expect("recovery requires a reduction");
                self.reductions[stage].remove(i);
                if !self.reductions[stage].iter().any(|(w, _)| *w == id) {
                    window.set_frozen(false);
                }
                Cause::Recovered
            }
            Signal::Stable => unreachable!("stable signals keep the size"),
        };
        self.sizes[stage] = new;
        self.log.push(AdapterAction {
            time: rec.end,
            stage,
            old_size: old,
            new_size: new,
            cause,
        });
    }

    fn on_forwards_complete(&mut self, iteration: usize, time: f64) {
        if iteration >= self.iterations {
            return;
        }
        if self.config.drain {
            self.draining[iteration] = true;
            for s in 0..self.sizes.len() {
                let old = self.sizes[s];
                let new = adjust(&self.state(s, Phase::Drain), Signal::Stable, self.config.min_size);
                if new != old {
                    self.log.push(AdapterAction {
                        time,
                        stage: s,
                        old_size: old,
                        new_size: new,
                        cause: Cause::Drain,
                    });
                }
            }
        }
        if iteration + 1 < self.iterations {
            self.log_fill(time);
        }
    }
}

impl Controller for AdaptiveController {
    fn size(&self, stage: usize, iteration: usize, kind: OpKind) -> u32 {
        let base = self.sizes[stage];
        let it = iteration.min(self.iterations.saturating_sub(1));
        match kind {
            OpKind::Forward if self.poor[stage] && !self.pipeline_full[it] => {
                base.min(fill_size(self.configured, true, self.config.min_size))
            }
            OpKind::Backward | OpKind::WeightUpdate if self.draining[it] => {
                adjust(&self.state(stage, Phase::Drain), Signal::Stable, self.config.min_size)
            }
            _ => base,
        }
    }

    fn observe(&mut self, event: &EngineEvent) {
        match event {
            EngineEvent::Transfer(rec) => self.on_transfer(rec),
            EngineEvent::PipelineFull { iteration, .. } => {
                if let Some(f) = self.pipeline_full.get_mut(*iteration) {
                    *f = true;
                }
            }
            EngineEvent::ForwardsComplete { iteration, time } => self.on_forwards_complete(*iteration, *time),
        }
    }
}

/// Action log produced by feeding recorded events to a fresh controller.
pub fn replay(config: &AdapterConfig, timing: &PipelineTiming, iterations: usize, events: &[EngineEvent]) -> Vec<AdapterAction> {
    let mut ctl = AdaptiveController::new(config.clone(), timing, iterations);
    for e in events {
        ctl.observe(e);
    }
    ctl.into_actions()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(values: impl IntoIterator<Item = f64>) -> MonitorWindow {
        let mut w = MonitorWindow::new(20, 0.05);
        for v in values {
            w.record(v);
        }
        w
    }

    #[test]
    fn baseline_of_equal_samples() {
        let w = full(std::iter::repeat_n(0.75, 20));
        assert_eq!(w.baseline(), Some(0.75));
        assert_eq!(detect_fluctuation(&w, 0.75, false, &AdapterConfig::default()), Signal::Stable);
        let short = full(std::iter::repeat_n(0.75, 19));
        assert_eq!(short.baseline(), None);
    }

    #[test]
    fn detection_thresholds() {
        let cfg = AdapterConfig::default();
        let mut w = full(std::iter::repeat_n(1.0, 20));
        for _ in 0..20 {
            w.record(1.5);
        }
        // only evicted samples feed the baseline, and those were all 1.0
        assert_eq!(w.baseline(), Some(1.0));
        assert_eq!(detect_fluctuation(&w, 1.0, false, &cfg), Signal::Degraded);

        let mut w = full(std::iter::repeat_n(1.0, 20));
        w.set_frozen(true);
        for _ in 0..20 {
            w.record(0.9);
        }
        assert_eq!(w.baseline(), Some(1.0));
        assert_eq!(detect_fluctuation(&w, 1.0, true, &cfg), Signal::Recovered);
        assert_eq!(detect_fluctuation(&w, 1.0, false, &cfg), Signal::Stable);
    }

    #[test]
    fn step_change_detected_within_a_window() {
        let cfg = AdapterConfig::default();
        let mut w = full(std::iter::repeat_n(1.0, 20));
        let base = w.baseline().unwrap();
        let mut detected = None;
        for k in 1..=20 {
            w.record(2.0);
            if detect_fluctuation(&w, base, false, &cfg) == Signal::Degraded {
                detected = Some(k);
                break;
            }
        }
        // (20 - k + 2k) / 20 > 1.2  <=>  k > 4
        assert_eq!(detected, Some(5));
    }

    #[test]
    fn normalization_ignores_resizing() {
        let mut w = MonitorWindow::new(20, 0.05);
        for _ in 0..20 {
            w.record_transfer(0.8, 32);
        }
        for _ in 0..20 {
            w.record_transfer(0.4, 16);
        }
        assert_eq!(detect_fluctuation(&w, w.baseline().unwrap(), false, &AdapterConfig::default()), Signal::Stable);
    }

    #[test]
    fn adjust_examples() {
        let s = |current, phase| StageBatchState { stage: 0, current, configured: 32, phase };
        assert_eq!(adjust(&s(32, Phase::Run), Signal::Degraded, 1), 16);
        assert_eq!(adjust(&s(1, Phase::Run), Signal::Degraded, 1), 1);
        assert_eq!(adjust(&s(16, Phase::Run), Signal::Recovered, 1), 32);
        assert_eq!(adjust(&s(32, Phase::Run), Signal::Recovered, 1), 32);
        assert_eq!(adjust(&s(8, Phase::Run), Signal::Stable, 1), 8);
        assert_eq!(adjust(&s(8, Phase::Drain), Signal::Stable, 1), 4);
        let odd = |current| StageBatchState { stage: 0, current, configured: 12, phase: Phase::Run };
        assert_eq!(adjust(&odd(12), Signal::Degraded, 1), 6);
        assert_eq!(adjust(&odd(3), Signal::Degraded, 1), 1);
        assert_eq!(adjust(&odd(1), Signal::Recovered, 1), 3);
        assert_eq!(adjust(&odd(3), Signal::Recovered, 1), 6);
        assert_eq!(fill_size(32, true, 1), 16);
        assert_eq!(fill_size(32, false, 1), 32);
    }
}
