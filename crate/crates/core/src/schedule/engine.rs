//! Discrete-event list scheduler shared by the schedule generator and the
//! network simulator.
//!
//! Resources are stages (one op at a time) and link directions (one transfer
//! at a time, FIFO). All events carrying the same timestamp are applied before
//! any idle resource is handed new work, and stages are served in index order,
//! so a run is a pure function of its inputs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;

use super::{Direction, OpKind, PipeOp, PipelineTiming, Policy, Schedule, ScheduleConfig, TransferRecord};
use crate::error::{Error, Result};

/// When a transfer that begins at `start` finishes.
pub trait LinkModel {
    fn transfer_end(&self, link: usize, direction: Direction, start: f64, samples: u32) -> f64;
}

/// Constant latency and bandwidth from the timing table.
pub struct StaticLinks<'a>(pub &'a PipelineTiming);

impl LinkModel for StaticLinks<'_> {
    fn transfer_end(&self, link: usize, _direction: Direction, start: f64, samples: u32) -> f64 {
        let l = &self.0.links[link];
        (start + l.latency) + l.bytes(samples) / l.bandwidth
    }
}

/// Notifications the engine hands to a [`Controller`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum EngineEvent {
    /// A transfer finished.
    Transfer(TransferRecord),
    /// The last stage started its first backward of `iteration`.
    PipelineFull { iteration: usize, time: f64 },
    /// The last stage finished every forward of `iteration`.
    ForwardsComplete { iteration: usize, time: f64 },
}

/// Chooses micro-batch sizes; may react to engine events.
pub trait Controller {
    /// Largest piece a stage cuts off its queue for a `kind` op.
    fn size(&self, stage: usize, iteration: usize, kind: OpKind) -> u32;
    fn observe(&mut self, event: &EngineEvent);
}

/// Every stage always uses the same size.
pub struct FixedSize(pub u32);

impl Controller for FixedSize {
    fn size(&self, _stage: usize, _iteration: usize, _kind: OpKind) -> u32 {
        self.0
    }

    fn observe(&mut self, _event: &EngineEvent) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Chunk {
    it: usize,
    lo: u32,
    hi: u32,
}

impl Chunk {
    fn len(&self) -> u32 {
        self.hi - self.lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Closing {
    AwaitSync,
    Syncing,
    AwaitOpt,
    Optimizing,
}

#[derive(Debug, Clone, Copy)]
enum Running {
    Micro(OpKind, Chunk),
    Sync,
    Opt(usize),
}

struct StageState {
    fwd_q: VecDeque<Chunk>,
    bwd_q: VecDeque<Chunk>,
    w_q: VecDeque<Chunk>,
    fused_w: Option<Chunk>,
    running: Option<Running>,
    fwd_done: Vec<u32>,
    bwd_done: Vec<u32>,
    w_done: Vec<u32>,
    opt_done: Vec<bool>,
    next_close: usize,
    closing: Closing,
    counters: Vec<[u32; 3]>,
    started_backward: Vec<bool>,
}

impl StageState {
    fn new(iterations: usize) -> Self {
        Self {
            fwd_q: VecDeque::new(),
            bwd_q: VecDeque::new(),
            w_q: VecDeque::new(),
            fused_w: None,
            running: None,
            fwd_done: vec![0; iterations],
            bwd_done: vec![0; iterations],
            w_done: vec![0; iterations],
            opt_done: vec![false; iterations],
            next_close: 0,
            closing: Closing::AwaitSync,
            counters: vec![[0; 3]; iterations],
            started_backward: vec![false; iterations],
        }
    }

    fn in_flight(&self) -> u64 {
        self.fwd_done.iter().map(|&x| x as u64).sum::<u64>() - self.bwd_done.iter().map(|&x| x as u64).sum::<u64>()
    }
}

#[derive(Default)]
struct LinkState {
    queue: VecDeque<Chunk>,
    busy: Option<(Chunk, f64)>,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    Stage(usize),
    Link(usize, Direction),
}

struct Event {
    time: f64,
    seq: u64,
    payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy)]
enum Choice {
    Sync,
    Opt,
    Micro(OpKind),
}

struct Engine<'a, L: LinkModel, C: Controller> {
    timing: &'a PipelineTiming,
    policy: Policy,
    config: &'a ScheduleConfig,
    links: &'a L,
    ctl: &'a mut C,
    stages: Vec<StageState>,
    fwd_links: Vec<LinkState>,
    bwd_links: Vec<LinkState>,
    heap: BinaryHeap<Event>,
    seq: u64,
    now: f64,
    ops: Vec<Vec<PipeOp>>,
    transfers: Vec<TransferRecord>,
}

/// Runs `config.iterations` iterations of `policy`; sizes come from `ctl`,
/// transfer times from `links`.
pub fn run_engine<L: LinkModel, C: Controller>(
    timing: &PipelineTiming,
    policy: Policy,
    config: &ScheduleConfig,
    links: &L,
    ctl: &mut C,
) -> Result<Schedule> {
    timing.validate()?;
    if config.iterations == 0 {
        return Err(Error::InvalidTiming("at least one iteration is required".into()));
    }
    let n = timing.stages.len();
    let mut engine = Engine {
        timing,
        policy,
        config,
        links,
        ctl,
        stages: (0..n).map(|_| StageState::new(config.iterations)).collect(),
        fwd_links: (0..n - 1).map(|_| LinkState::default()).collect(),
        bwd_links: (0..n - 1).map(|_| LinkState::default()).collect(),
        heap: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        ops: vec![Vec::new(); n],
        transfers: Vec::new(),
    };
    for it in 0..config.iterations {
        engine.stages[0].fwd_q.push_back(Chunk {
            it,
            lo: 0,
            hi: timing.batch,
        });
    }
    engine.run()?;
    let makespan = engine.ops.iter().flatten().map(|o| o.end).fold(0.0, f64::max);
    Ok(Schedule {
        policy,
        batch: timing.batch,
        microbatch: timing.microbatch,
        iterations: config.iterations,
        async_iterations: config.async_iterations,
        stages: engine.ops,
        transfers: engine.transfers,
        makespan,
    })
}

impl<L: LinkModel, C: Controller> Engine<'_, L, C> {
    fn push(&mut self, time: f64, payload: Payload) {
        self.seq += 1;
        self.heap.push(Event {
            time,
            seq: self.seq,
            payload,
        });
    }

    fn run(&mut self) -> Result<()> {
        self.dispatch();
        while let Some(ev) = self.heap.pop() {
            self.now = ev.time;
            self.complete(ev.payload);
            while self.heap.peek().is_some_and(|e| e.time == self.now) {
                let e = self.heap.pop().expect("peeked");
                self.complete(e.payload);
            }
            self.dispatch();
        }
        if self.stages.iter().any(|s| s.next_close < self.config.iterations) {
            return Err(Error::SchedulingBug {
                time: self.now,
                detail: self.dump(),
            });
        }
        Ok(())
    }

    fn dump(&self) -> String {
        let mut out = String::from("no pending events but work remains;");
        for (i, s) in self.stages.iter().enumerate() {
            let _ = write!(
                out,
                " stage {i}: fwd_q={:?} bwd_q={:?} w_q={:?} fwd_done={:?} bwd_done={:?} w_done={:?} closing={:?}@{};",
                s.fwd_q.iter().map(|c| (c.it, c.lo, c.hi)).collect::<Vec<_>>(),
                s.bwd_q.iter().map(|c| (c.it, c.lo, c.hi)).collect::<Vec<_>>(),
                s.w_q.len(),
                s.fwd_done,
                s.bwd_done,
                s.w_done,
                s.closing,
                s.next_close
            );
        }
        for (i, l) in self.fwd_links.iter().enumerate() {
            let _ = write!(out, " link {i} fwd queued={};", l.queue.len());
        }
        for (i, l) in self.bwd_links.iter().enumerate() {
            let _ = write!(out, " link {i} bwd queued={};", l.queue.len());
        }
        out
    }

    fn last(&self) -> usize {
        self.stages.len() - 1
    }

    fn complete(&mut self, payload: Payload) {
        match payload {
            Payload::Stage(s) => self.finish_op(s),
            Payload::Link(l, dir) => self.finish_transfer(l, dir),
        }
    }

    fn finish_op(&mut self, s: usize) {
        let running = self.stages[s].running.take().expect("completion for idle stage");
        let fused = self.policy.fuses_weight();
        let batch = self.timing.batch;
        match running {
            Running::Micro(OpKind::Forward, c) => {
                let st = &mut self.stages[s];
                st.fwd_done[c.it] += c.len();
                let all_done = st.fwd_done[c.it] == batch;
                if s < self.last() {
                    self.fwd_links[s].queue.push_back(c);
                } else {
                    self.stages[s].bwd_q.push_back(c);
                    if all_done {
                        self.ctl.observe(&EngineEvent::ForwardsComplete {
                            iteration: c.it,
                            time: self.now,
                        });
                    }
                }
            }
            Running::Micro(OpKind::Backward, c) => {
                self.stages[s].bwd_done[c.it] += c.len();
                if fused {
                    self.stages[s].fused_w = Some(c);
                } else {
                    self.stages[s].w_q.push_back(c);
                    if s > 0 {
                        self.bwd_links[s - 1].queue.push_back(c);
                    }
                }
            }
            Running::Micro(OpKind::WeightUpdate, c) => {
                self.stages[s].w_done[c.it] += c.len();
                if fused && s > 0 {
                    self.bwd_links[s - 1].queue.push_back(c);
                }
            }
            Running::Micro(kind, _) => unreachable!("{kind:?} is not a micro op"),
            Running::Sync => self.stages[s].closing = Closing::AwaitOpt,
            Running::Opt(it) => {
                let st = &mut self.stages[s];
                st.opt_done[it] = true;
                st.next_close += 1;
                st.closing = Closing::AwaitSync;
            }
        }
    }

    fn finish_transfer(&mut self, l: usize, dir: Direction) {
        let link = match dir {
            Direction::Forward => &mut self.fwd_links[l],
            Direction::Backward => &mut self.bwd_links[l],
        };
        let (c, start) = link.busy.take().expect("completion for idle link");
        let rec = TransferRecord {
            link: l,
            direction: dir,
            iteration: c.it,
            samples: [c.lo, c.hi],
            start,
            end: self.now,
        };
        match dir {
            Direction::Forward => self.stages[l + 1].fwd_q.push_back(c),
            Direction::Backward => self.stages[l].bwd_q.push_back(c),
        }
        self.ctl.observe(&EngineEvent::Transfer(rec.clone()));
        self.transfers.push(rec);
    }

    fn dispatch(&mut self) {
        for l in 0..self.fwd_links.len() {
            for dir in [Direction::Forward, Direction::Backward] {
                self.start_transfer(l, dir);
            }
        }
        for s in 0..self.stages.len() {
            if self.stages[s].running.is_none() {
                if let Some(choice) = self.choose(s) {
                    self.start_op(s, choice);
                }
            }
        }
    }

    fn start_transfer(&mut self, l: usize, dir: Direction) {
        let link = match dir {
            Direction::Forward => &mut self.fwd_links[l],
            Direction::Backward => &mut self.bwd_links[l],
        };
        if link.busy.is_some() {
            return;
        }
        let Some(c) = link.queue.pop_front() else { return };
        link.busy = Some((c, self.now));
        let end = self.links.transfer_end(l, dir, self.now, c.len());
        self.push(end, Payload::Link(l, dir));
    }

    fn forward_gate_open(&self, s: usize, it: usize) -> bool {
        it == 0 || self.config.async_iterations || self.stages[s].opt_done[it - 1]
    }

    fn choose(&self, s: usize) -> Option<Choice> {
        let st = &self.stages[s];
        let batch = self.timing.batch;
        if st.next_close < self.config.iterations {
            let it = st.next_close;
            match st.closing {
                Closing::AwaitSync if st.w_done[it] == batch => return Some(Choice::Sync),
                Closing::AwaitOpt => return Some(Choice::Opt),
                _ => {}
            }
        }
        if st.fused_w.is_some() {
            return Some(Choice::Micro(OpKind::WeightUpdate));
        }
        let f_ready = st.fwd_q.front().is_some_and(|c| self.forward_gate_open(s, c.it));
        let b_ready = !st.bwd_q.is_empty();
        let w_ready = !st.w_q.is_empty();
        let quota = (self.stages.len() - s) as u64 * self.timing.microbatch as u64;
        let f = Some(Choice::Micro(OpKind::Forward));
        let b = Some(Choice::Micro(OpKind::Backward));
        let w = Some(Choice::Micro(OpKind::WeightUpdate));
        match self.policy {
            Policy::ZbCompact => {
                if f_ready {
                    f
                } else if b_ready {
                    b
                } else if w_ready {
                    w
                } else {
                    None
                }
            }
            Policy::ZbOriginal => {
                let warmup = st.fwd_q.front().is_some_and(|c| (st.fwd_done[c.it] as u64) < quota);
                if f_ready && warmup {
                    f
                } else if b_ready {
                    b
                } else if w_ready {
                    w
                } else if f_ready && st.in_flight() < quota {
                    f
                } else {
                    None
                }
            }
            Policy::OneFOneB => {
                let cur = st.fwd_done.iter().position(|&d| d < batch);
                let forward_turn = cur.is_some_and(|it| it == st.next_close || self.config.async_iterations)
                    && st.in_flight() < quota;
                if forward_turn {
                    f_ready.then_some(Choice::Micro(OpKind::Forward))
                } else {
                    b_ready.then_some(Choice::Micro(OpKind::Backward))
                }
            }
            Policy::Gpipe => {
                if f_ready {
                    f
                } else if st.bwd_q.front().is_some_and(|c| st.fwd_done[c.it] == batch) {
                    b
                } else {
                    None
                }
            }
        }
    }

    fn start_op(&mut self, s: usize, choice: Choice) {
        let now = self.now;
        let (running, kind, chunk) = match choice {
            Choice::Sync => {
                let it = self.stages[s].next_close;
                self.stages[s].closing = Closing::Syncing;
                (Running::Sync, OpKind::WeightSync, Chunk { it, lo: 0, hi: self.timing.batch })
            }
            Choice::Opt => {
                let it = self.stages[s].next_close;
                self.stages[s].closing = Closing::Optimizing;
                (Running::Opt(it), OpKind::OptimizerStep, Chunk { it, lo: 0, hi: self.timing.batch })
            }
            Choice::Micro(kind) => {
                let c = self.take_chunk(s, kind);
                (Running::Micro(kind, c), kind, c)
            }
        };
        if kind == OpKind::Backward && s == self.last() && !self.stages[s].started_backward[chunk.it] {
            self.stages[s].started_backward[chunk.it] = true;
            self.ctl.observe(&EngineEvent::PipelineFull {
                iteration: chunk.it,
                time: now,
            });
        }
        let microbatch = match kind {
            OpKind::Forward | OpKind::Backward | OpKind::WeightUpdate => {
                let slot = match kind {
                    OpKind::Forward => 0,
                    OpKind::Backward => 1,
                    _ => 2,
                };
                let counter = &mut self.stages[s].counters[chunk.it][slot];
                *counter += 1;
                Some(*counter - 1)
            }
            _ => None,
        };
        let end = now + self.timing.duration(s, kind, chunk.len());
        self.ops[s].push(PipeOp {
            kind,
            stage: s,
            iteration: chunk.it,
            microbatch,
            samples: [chunk.lo, chunk.hi],
            start: now,
            end,
        });
        self.stages[s].running = Some(running);
        self.push(end, Payload::Stage(s));
    }

    /// Pops the next piece for `kind`, cutting queued ranges to the current size.
    fn take_chunk(&mut self, s: usize, kind: OpKind) -> Chunk {
        let st = &mut self.stages[s];
        let queue = match kind {
            OpKind::Forward => &mut st.fwd_q,
            OpKind::Backward => &mut st.bwd_q,
            OpKind::WeightUpdate => {
                return match st.fused_w.take() {
                    Some(c) => c,
                    None => st.w_q.pop_front().expect("W chosen with empty queue"),
                };
            }
            _ => unreachable!(),
        };
        let front = *queue.front().expect("op chosen with empty queue");
        let size = self.ctl.size(s, front.it, kind).max(1);
        if front.len() <= size {
            queue.pop_front().expect("non-empty")
        } else {
            let piece = Chunk {
                it: front.it,
                lo: front.lo,
                hi: front.lo + size,
            };
            queue.front_mut().expect("non-empty").lo = piece.hi;
            piece
        }
    }
}
