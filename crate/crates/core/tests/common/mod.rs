#![allow(dead_code)]

use geopipe::costmodel::{CostContext, LayerSpec, ModelSpec, ParallelPlan};
use geopipe::fixtures::{grouped_cluster, GroupSpec};
use geopipe::grouping::Hierarchy;
use geopipe::planner::{candidate_plan, Candidate};
use geopipe::profiling::ClusterTopology;
use geopipe::schedule::{Direction, LinkTiming, OpKind, PipelineTiming, Policy, Schedule, StageTiming};
use geopipe::simulator::{NetworkTrace, TraceRecord};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

pub fn random_timing(rng: &mut impl Rng) -> PipelineTiming {
    let n = rng.random_range(1..=6usize);
    let m = *[1u32, 2, 3, 4, 8].choose(rng).unwrap();
    let batch = m * rng.random_range(1..=8u32);
    let stages = (0..n)
        .map(|_| StageTiming {
            forward: rng.random_range(0.1..2.0),
            backward: rng.random_range(0.1..2.0),
            weight: if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.05..2.0) },
            sync: if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..1.0) },
            optimizer: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.5) },
        })
        .collect();
    let links = (0..n.saturating_sub(1))
        .map(|_| {
            let seconds: f64 = rng.random_range(0.0..3.0);
            let latency = rng.random_range(0.0..0.2f64).min(seconds);
            let bandwidth = rng.random_range(1e6..1e9);
            LinkTiming {
                latency,
                bandwidth,
                bytes_per_sample: (seconds - latency) * bandwidth / m as f64,
            }
        })
        .collect();
    PipelineTiming {
        batch,
        microbatch: m,
        stages,
        links,
    }
}

pub fn random_policy(rng: &mut impl Rng) -> Policy {
    *Policy::ALL.choose(rng).unwrap()
}

/// A few bandwidth steps per link, multipliers in `[0.2, 1.5]`.
pub fn random_trace(rng: &mut impl Rng, links: usize, horizon: f64) -> NetworkTrace {
    let mut records = Vec::new();
    for link in 0..links {
        let mut t = 0.0;
        for _ in 0..rng.random_range(0..4) {
            t += rng.random_range(0.0..horizon / 2.0);
            records.push(TraceRecord {
                link,
                t,
                multiplier: rng.random_range(0.2..1.5),
            });
        }
    }
    NetworkTrace::new(&records).expect("generated trace is valid")
}

fn expected_duration(timing: &PipelineTiming, stage: usize, kind: OpKind, size: u32) -> f64 {
    let st = &timing.stages[stage];
    let full = match kind {
        OpKind::Forward => st.forward,
        OpKind::Backward => st.backward,
        OpKind::WeightUpdate => st.weight,
        OpKind::WeightSync => return st.sync,
        OpKind::OptimizerStep => return st.optimizer,
    };
    full * size as f64 / timing.microbatch as f64
}

/// Brute-force re-check of a schedule with linear scans only. Reports one
/// entry per bad op or transfer duration, per overlapping pair, per unmet
/// prerequisite of each op or transfer, and per incomplete (stage, iteration,
/// kind).
pub fn naive_check(s: &Schedule, timing: &PipelineTiming) -> Vec<String> {
    let mut bad = Vec::new();
    let n = timing.stages.len();
    if s.stages.len() != n {
        return vec!["stage count".into()];
    }
    let ops: Vec<_> = s.ops().collect();
    let inside = |outer: [u32; 2], inner: [u32; 2]| outer[0] <= inner[0] && inner[1] <= outer[1];
    let find = |stage: usize, it: usize, kind: OpKind, samples: [u32; 2], exact: bool| {
        ops.iter()
            .find(|o| {
                o.stage == stage
                    && o.iteration == it
                    && o.kind == kind
                    && if exact { o.samples == samples } else { inside(o.samples, samples) }
            })
            .map(|o| o.end)
    };
    let arrival = |link: usize, dir: Direction, it: usize, samples: [u32; 2]| {
        s.transfers
            .iter()
            .find(|t| t.link == link && t.direction == dir && t.iteration == it && inside(t.samples, samples))
            .map(|t| t.end)
    };
    let mut need = |what: String, start: f64, dep: Option<f64>| match dep {
        None => bad.push(format!("{what}: missing prerequisite")),
        Some(e) if start < e => bad.push(format!("{what}: starts before prerequisite")),
        _ => {}
    };

    for o in &ops {
        let want = expected_duration(timing, o.stage, o.kind, o.samples[1] - o.samples[0]);
        let got = o.end - o.start;
        if got < 0.0 || (got - want).abs() > 1e-9 * want.max(1.0) {
            need(format!("duration of {o:?}"), 0.0, None);
        }
    }
    for t in &s.transfers {
        if t.end < t.start {
            need(format!("negative transfer {t:?}"), 0.0, None);
        }
    }
    for i in 0..ops.len() {
        for j in i + 1..ops.len() {
            let (a, b) = (ops[i], ops[j]);
            if a.stage == b.stage && a.start < b.end && b.start < a.end {
                need(format!("stage {} overlap", a.stage), 0.0, None);
            }
        }
    }
    for i in 0..s.transfers.len() {
        for j in i + 1..s.transfers.len() {
            let (a, b) = (&s.transfers[i], &s.transfers[j]);
            if a.link == b.link && a.direction == b.direction && a.start < b.end && b.start < a.end {
                need(format!("link {} overlap", a.link), 0.0, None);
            }
        }
    }

    for o in &ops {
        let (st, it, smp) = (o.stage, o.iteration, o.samples);
        let what = format!("{o:?}");
        let prev_opt = if it > 0 { find(st, it - 1, OpKind::OptimizerStep, [0, 0], false) } else { None };
        match o.kind {
            OpKind::Forward => {
                if st > 0 {
                    need(what.clone(), o.start, arrival(st - 1, Direction::Forward, it, smp));
                }
                if let (false, Some(e)) = (s.async_iterations, prev_opt) {
                    need(what, o.start, Some(e));
                }
            }
            OpKind::Backward => {
                need(what.clone(), o.start, find(st, it, OpKind::Forward, smp, false));
                if st + 1 < n {
                    need(what, o.start, arrival(st, Direction::Backward, it, smp));
                }
            }
            OpKind::WeightUpdate => need(what, o.start, find(st, it, OpKind::Backward, smp, true)),
            OpKind::WeightSync => {
                let last_w = ops
                    .iter()
                    .filter(|w| w.stage == st && w.iteration == it && w.kind == OpKind::WeightUpdate)
                    .map(|w| w.end)
                    .fold(f64::NEG_INFINITY, f64::max);
                need(what.clone(), o.start, Some(last_w));
                if let Some(e) = prev_opt {
                    need(what, o.start, Some(e));
                }
            }
            OpKind::OptimizerStep => need(what, o.start, find(st, it, OpKind::WeightSync, [0, 0], false)),
        }
    }

    let grad_producer = if matches!(s.policy, Policy::Gpipe | Policy::OneFOneB) {
        OpKind::WeightUpdate
    } else {
        OpKind::Backward
    };
    for t in &s.transfers {
        let (src, kind) = match t.direction {
            Direction::Forward => (t.link, OpKind::Forward),
            Direction::Backward => (t.link + 1, grad_producer),
        };
        need(format!("{t:?}"), t.start, find(src, t.iteration, kind, t.samples, true));
    }

    for st in 0..n {
        for it in 0..s.iterations {
            for kind in [OpKind::Forward, OpKind::Backward, OpKind::WeightUpdate] {
                // every sample exactly once, no empty chunk
                let mine: Vec<_> = ops.iter().filter(|o| o.stage == st && o.iteration == it && o.kind == kind).collect();
                let once = (0..s.batch).all(|x| mine.iter().filter(|o| o.samples[0] <= x && x < o.samples[1]).count() == 1);
                let sized = mine.iter().all(|o| o.samples[0] < o.samples[1] && o.samples[1] <= s.batch);
                if !(once && sized) {
                    need(format!("stage {st} it {it} {kind:?} coverage"), 0.0, None);
                }
            }
            for kind in [OpKind::WeightSync, OpKind::OptimizerStep] {
                if ops.iter().filter(|o| o.stage == st && o.iteration == it && o.kind == kind).count() != 1 {
                    need(format!("stage {st} it {it} {kind:?} count"), 0.0, None);
                }
            }
        }
    }
    bad
}

/// Per-(stage, iteration, kind) sample totals and per-(link, direction,
/// iteration) transfer totals, each of which must equal the batch.
pub fn sample_totals(s: &Schedule) -> Vec<(String, u64)> {
    let mut out = Vec::new();
    for (st, ops) in s.stages.iter().enumerate() {
        for it in 0..s.iterations {
            for kind in [OpKind::Forward, OpKind::Backward, OpKind::WeightUpdate] {
                let total: u64 = ops
                    .iter()
                    .filter(|o| o.iteration == it && o.kind == kind)
                    .map(|o| (o.samples[1] - o.samples[0]) as u64)
                    .sum();
                out.push((format!("stage {st} it {it} {kind:?}"), total));
            }
        }
    }
    for link in 0..s.stages.len().saturating_sub(1) {
        for dir in [Direction::Forward, Direction::Backward] {
            for it in 0..s.iterations {
                let total: u64 = s
                    .transfers
                    .iter()
                    .filter(|t| t.link == link && t.direction == dir && t.iteration == it)
                    .map(|t| (t.samples[1] - t.samples[0]) as u64)
                    .sum();
                out.push((format!("link {link} {dir:?} it {it}"), total));
            }
        }
    }
    out
}

/// Cluster of `fgs` well-separated network groups and a model with
/// `layers` layers; every group has 1 to 4 devices.
pub fn random_problem(rng: &mut impl Rng, fgs: usize, layers: usize) -> (ClusterTopology, ModelSpec) {
    let groups: Vec<GroupSpec> = (0..fgs)
        .map(|g| GroupSpec {
            prefix: format!("g{g}d"),
            capacities: (0..rng.random_range(1..=4)).map(|_| rng.random_range(1.0..8.0) * 1e12).collect(),
            latency: 1e-4,
            bandwidth: rng.random_range(5e9..2e10),
        })
        .collect();
    let cross: Vec<(f64, f64)> = (0..fgs * fgs)
        .map(|_| (rng.random_range(2e-3..1e-2), rng.random_range(1e8..5e8)))
        .collect();
    let topo = grouped_cluster(&groups, |g, h| cross[g * fgs + h]);
    let model = ModelSpec::new(
        (0..layers)
            .map(|_| LayerSpec {
                fwd_flops: rng.random_range(1e10..5e10),
                bwd_input_flops: rng.random_range(1e10..5e10),
                bwd_weight_flops: rng.random_range(1e10..5e10),
                activation_out_bytes: rng.random_range(1e5..1e6),
                param_bytes: rng.random_range(1e6..1e8),
            })
            .collect(),
    );
    (topo, model)
}

/// Random stage order and layer cuts over every FG.
pub fn random_candidate(rng: &mut impl Rng, fgs: usize, layers: usize) -> Candidate {
    let mut order: Vec<usize> = (0..fgs).collect();
    order.shuffle(rng);
    let mut interior: Vec<usize> = (1..layers).collect();
    interior.shuffle(rng);
    let mut cuts: Vec<usize> = interior.into_iter().take(fgs - 1).collect();
    cuts.sort_unstable();
    Candidate { order, cuts }
}

/// Random plan in which every boundary transfer fits inside the receiving
/// stage's per-micro-batch compute.
pub fn compute_bound_plan(rng: &mut impl Rng, ctx: &CostContext<'_>, batch: u32, microbatch: u32) -> Option<ParallelPlan> {
    let fgs = ctx.hierarchy.first_level.len();
    for _ in 0..50 {
        let cand = random_candidate(rng, fgs, ctx.model.layers.len());
        let plan = candidate_plan(ctx, &cand, batch, microbatch);
        let terms = ctx.stage_terms(&plan).ok()?;
        if terms.windows(2).all(|w| w[0].transfer_out <= w[1].compute) {
            return Some(plan);
        }
    }
    None
}

pub fn hierarchy(topo: &ClusterTopology) -> Hierarchy {
    Hierarchy::build(topo, 0.3, 0.3).expect("valid thresholds")
}
