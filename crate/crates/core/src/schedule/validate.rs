use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Direction, OpKind, PipeOp, PipelineTiming, Schedule, TransferRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Negative or mis-scaled op/transfer duration.
    Duration,
    /// Two ops overlap on one stage.
    StageOverlap,
    /// Two transfers overlap on one link direction.
    LinkOverlap,
    /// An op's prerequisite is absent.
    MissingDependency,
    /// An op starts before its prerequisite ends.
    Dependency,
    /// An iteration's work starts before the previous iteration closed.
    Gating,
    /// Some (stage, iteration) lacks full F/B/W coverage or its closing ops.
    Coverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub stage: Option<usize>,
    pub detail: String,
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

fn contains(outer: [u32; 2], inner: [u32; 2]) -> bool {
    outer[0] <= inner[0] && inner[1] <= outer[1]
}

struct Index<'a> {
    ops: HashMap<(usize, usize, OpKind), Vec<&'a PipeOp>>,
    exact: HashMap<(usize, usize, OpKind, [u32; 2]), &'a PipeOp>,
    transfers: HashMap<(usize, Direction, usize), Vec<&'a TransferRecord>>,
}

impl<'a> Index<'a> {
    fn new(s: &'a Schedule) -> Self {
        let mut ops: HashMap<_, Vec<&PipeOp>> = HashMap::new();
        let mut exact = HashMap::new();
        for op in s.ops() {
            ops.entry((op.stage, op.iteration, op.kind)).or_default().push(op);
            exact.entry((op.stage, op.iteration, op.kind, op.samples)).or_insert(op);
        }
        for v in ops.values_mut() {
            v.sort_by_key(|o| o.samples);
        }
        let mut transfers: HashMap<_, Vec<&TransferRecord>> = HashMap::new();
        for t in &s.transfers {
            transfers.entry((t.link, t.direction, t.iteration)).or_default().push(t);
        }
        for v in transfers.values_mut() {
            v.sort_by_key(|t| t.samples);
        }
        Self { ops, exact, transfers }
    }

    fn containing_op(&self, stage: usize, it: usize, kind: OpKind, samples: [u32; 2]) -> Option<&'a PipeOp> {
        let v = self.ops.get(&(stage, it, kind))?;
        let i = v.partition_point(|o| o.samples[0] <= samples[0]);
        (i > 0 && contains(v[i - 1].samples, samples)).then(|| v[i - 1])
    }

    fn containing_transfer(&self, link: usize, dir: Direction, it: usize, samples: [u32; 2]) -> Option<&'a TransferRecord> {
        let v = self.transfers.get(&(link, dir, it))?;
        let i = v.partition_point(|t| t.samples[0] <= samples[0]);
        (i > 0 && contains(v[i - 1].samples, samples)).then(|| v[i - 1])
    }

    fn all(&self, stage: usize, it: usize, kind: OpKind) -> &[&'a PipeOp] {
        self.ops.get(&(stage, it, kind)).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Counts pairwise overlaps among intervals with a start-sorted sweep.
fn count_overlaps(mut iv: Vec<(f64, f64)>) -> usize {
    iv.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut n = 0;
    for i in 0..iv.len() {
        for j in i + 1..iv.len() {
            if iv[j].0 >= iv[i].1 {
                break;
            }
            if overlaps(iv[i], iv[j]) {
                n += 1;
            }
        }
    }
    n
}

fn partitions(ranges: &[&PipeOp], batch: u32) -> bool {
    let mut next = 0;
    for o in ranges {
        if o.samples[0] != next || o.samples[1] <= o.samples[0] {
            return false;
        }
        next = o.samples[1];
    }
    next == batch
}

/// Every broken rule, one entry per offending op, pair or (stage, iteration).
pub fn validate_schedule(s: &Schedule, timing: &PipelineTiming) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |kind, stage: Option<usize>, detail: String| out.push(Violation { kind, stage, detail });
    let n = s.stages.len();
    if n != timing.stages.len() {
        flag(
            ViolationKind::Coverage,
            None,
            format!("schedule has {n} stages, timing has {}", timing.stages.len()),
        );
        return out;
    }
    let idx = Index::new(s);
    let last = n - 1;

    for op in s.ops() {
        let expected = timing.duration(op.stage, op.kind, op.size());
        let d = op.duration();
        if d < 0.0 || (d - expected).abs() > 1e-9 * expected.max(1.0) {
            flag(ViolationKind::Duration, Some(op.stage), format!("{} lasts {d}, expected {expected}", op.label()));
        }
    }
    for t in &s.transfers {
        if t.end < t.start {
            flag(ViolationKind::Duration, None, format!("transfer on link {} ends before it starts", t.link));
        }
    }

    for (st, ops) in s.stages.iter().enumerate() {
        let k = count_overlaps(ops.iter().map(|o| (o.start, o.end)).collect());
        for _ in 0..k {
            flag(ViolationKind::StageOverlap, Some(st), "ops overlap".into());
        }
    }
    let mut by_link: HashMap<(usize, Direction), Vec<(f64, f64)>> = HashMap::new();
    for t in &s.transfers {
        by_link.entry((t.link, t.direction)).or_default().push((t.start, t.end));
    }
    let mut keys: Vec<_> = by_link.keys().copied().collect();
    keys.sort();
    for key in keys {
        let k = count_overlaps(by_link.remove(&key).unwrap_or_default());
        for _ in 0..k {
            flag(ViolationKind::LinkOverlap, None, format!("transfers overlap on link {} {:?}", key.0, key.1));
        }
    }

    let mut need = |kind: ViolationKind, st: usize, what: &str, start: f64, dep_end: Option<f64>| match dep_end {
        None => flag(ViolationKind::MissingDependency, Some(st), format!("{what}: prerequisite missing")),
        Some(e) if start < e => flag(kind, Some(st), format!("{what} starts at {start} before {e}")),
        _ => {}
    };

    for op in s.ops() {
        let (st, it, smp) = (op.stage, op.iteration, op.samples);
        let what = format!("stage {st} it {it} {}", op.label());
        match op.kind {
            OpKind::Forward => {
                if st > 0 {
                    let arr = idx.containing_transfer(st - 1, Direction::Forward, it, smp).map(|t| t.end);
                    need(ViolationKind::Dependency, st, &what, op.start, arr);
                }
                if it > 0 && !s.async_iterations {
                    if let Some(opt) = idx.all(st, it - 1, OpKind::OptimizerStep).first() {
                        need(ViolationKind::Gating, st, &what, op.start, Some(opt.end));
                    }
                }
            }
            OpKind::Backward => {
                let f = idx.containing_op(st, it, OpKind::Forward, smp).map(|o| o.end);
                need(ViolationKind::Dependency, st, &what, op.start, f);
                if st < last {
                    let arr = idx.containing_transfer(st, Direction::Backward, it, smp).map(|t| t.end);
                    need(ViolationKind::Dependency, st, &what, op.start, arr);
                }
            }
            OpKind::WeightUpdate => {
                let b = idx.exact.get(&(st, it, OpKind::Backward, smp)).map(|o| o.end);
                need(ViolationKind::Dependency, st, &what, op.start, b);
            }
            OpKind::WeightSync => {
                let ws = idx.all(st, it, OpKind::WeightUpdate);
                let w_end = ws.iter().map(|o| o.end).fold(f64::NEG_INFINITY, f64::max);
                if op.start < w_end {
                    need(ViolationKind::Dependency, st, &what, op.start, Some(w_end));
                }
                if it > 0 {
                    if let Some(opt) = idx.all(st, it - 1, OpKind::OptimizerStep).first() {
                        need(ViolationKind::Gating, st, &what, op.start, Some(opt.end));
                    }
                }
            }
            OpKind::OptimizerStep => {
                let sync = idx.all(st, it, OpKind::WeightSync).first().map(|o| o.end);
                need(ViolationKind::Dependency, st, &what, op.start, sync);
            }
        }
    }

    let producer = if s.policy.fuses_weight() {
        OpKind::WeightUpdate
    } else {
        OpKind::Backward
    };
    for t in &s.transfers {
        let (src, kind) = match t.direction {
            Direction::Forward => (t.link, OpKind::Forward),
            Direction::Backward => (t.link + 1, producer),
        };
        let what = format!("transfer link {} {:?} it {} {:?}", t.link, t.direction, t.iteration, t.samples);
        let p = idx.exact.get(&(src, t.iteration, kind, t.samples)).map(|o| o.end);
        need(ViolationKind::Dependency, src, &what, t.start, p);
    }

    for st in 0..n {
        for it in 0..s.iterations {
            for kind in [OpKind::Forward, OpKind::Backward, OpKind::WeightUpdate] {
                if !partitions(idx.all(st, it, kind), s.batch) {
                    flag(
                        ViolationKind::Coverage,
                        Some(st),
                        format!("stage {st} it {it}: {kind:?} ops do not cover the batch exactly once"),
                    );
                }
            }
            for kind in [OpKind::WeightSync, OpKind::OptimizerStep] {
                let c = idx.all(st, it, kind).len();
                if c != 1 {
                    flag(ViolationKind::Coverage, Some(st), format!("stage {st} it {it}: {c} {kind:?} ops"));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::schedule::{generate_schedule, Policy, ScheduleConfig};

    #[test]
    fn generated_slow_link_is_clean() {
        let timing = fixtures::slow_link_timing();
        for p in Policy::ALL {
            let s = generate_schedule(&timing, p, &ScheduleConfig::default()).unwrap();
            assert_eq!(validate_schedule(&s, &timing), vec![], "{p}");
        }
    }

    #[test]
    fn backward_before_forward_is_one_violation() {
        let timing = crate::schedule::PipelineTiming::uniform(1, 1.0, 1.0, 1.0, 0.0, 1, 1);
        let mut s = generate_schedule(&timing, Policy::ZbCompact, &ScheduleConfig::default()).unwrap();
        // F [0,1) B [1,2) W [2,3) Sync Opt; swap F and B
        s.stages[0][0].start = 1.0;
        s.stages[0][0].end = 2.0;
        s.stages[0][1].start = 0.0;
        s.stages[0][1].end = 1.0;
        let v = validate_schedule(&s, &timing);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Dependency);
    }

    #[test]
    fn missing_ops_are_reported() {
        let timing = fixtures::slow_link_timing();
        let mut s = generate_schedule(&timing, Policy::ZbCompact, &ScheduleConfig::default()).unwrap();
        s.stages[2].retain(|o| o.kind != OpKind::OptimizerStep);
        let v = validate_schedule(&s, &timing);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Coverage);
    }
}
