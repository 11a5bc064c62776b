mod common;

use geopipe::adapter::{replay, AdapterConfig, Cause};
use geopipe::costmodel::CostContext;
use geopipe::planner::{search_plan, SearchConfig};
use geopipe::schedule::{generate_schedule, Direction, OpKind, PipeOp, Policy, Schedule, ScheduleConfig};
use geopipe::simulator::{simulate, NetworkTrace, SimConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-9;

/// Earliest time `o` could have started given the recorded times of
/// everything it depends on.
fn ready_time(s: &Schedule, o: &PipeOp) -> f64 {
    let n = s.stages.len();
    let ops = &s.stages[o.stage];
    let end_of = |kind: OpKind, it: usize, pick: &dyn Fn(&PipeOp) -> bool| {
        ops.iter().filter(|p| p.kind == kind && p.iteration == it && pick(p)).map(|p| p.end).fold(0.0, f64::max)
    };
    let arrival = |link: usize, dir: Direction| {
        s.transfers
            .iter()
            .filter(|t| t.link == link && t.direction == dir && t.iteration == o.iteration)
            .filter(|t| t.samples[0] <= o.samples[0] && o.samples[1] <= t.samples[1])
            .map(|t| t.end)
            .fold(0.0, f64::max)
    };
    let prev_opt = if o.iteration > 0 { end_of(OpKind::OptimizerStep, o.iteration - 1, &|_| true) } else { 0.0 };
    let within = |p: &PipeOp| p.samples[0] <= o.samples[0] && o.samples[1] <= p.samples[1];
    match o.kind {
        OpKind::Forward => {
            let data = if o.stage > 0 { arrival(o.stage - 1, Direction::Forward) } else { 0.0 };
            if s.async_iterations { data } else { data.max(prev_opt) }
        }
        OpKind::Backward => {
            let grad = if o.stage + 1 < n { arrival(o.stage, Direction::Backward) } else { 0.0 };
            grad.max(end_of(OpKind::Forward, o.iteration, &within))
        }
        OpKind::WeightUpdate => end_of(OpKind::Backward, o.iteration, &|p| p.samples == o.samples),
        OpKind::WeightSync => end_of(OpKind::WeightUpdate, o.iteration, &|_| true).max(prev_opt),
        OpKind::OptimizerStep => end_of(OpKind::WeightSync, o.iteration, &|_| true),
    }
}

/// Idle intervals of one stage between time 0 and its last op.
fn idle_gaps(ops: &[PipeOp]) -> Vec<(f64, f64)> {
    let mut spans: Vec<(f64, f64)> = ops.iter().map(|o| (o.start, o.end)).collect();
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut gaps = Vec::new();
    let mut busy_until = 0.0;
    for (start, end) in spans {
        if start > busy_until + EPS {
            gaps.push((busy_until, start));
        }
        busy_until = f64::max(busy_until, end);
    }
    gaps
}

fn sim_config(rng: &mut impl Rng, iterations: usize, window: usize) -> SimConfig {
    SimConfig {
        iterations,
        warmup: 1,
        async_iterations: rng.random_bool(0.2),
        adapter: AdapterConfig {
            window,
            drain: rng.random_bool(0.5),
            fill_bound: rng.random_bool(0.5).then(|| rng.random_range(0.0..0.5)),
            ..Default::default()
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zb_compact_never_idles_with_ready_work(seed in any::<u64>(), iterations in 1usize..4, async_iterations in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timing = common::random_timing(&mut rng);
        let s = generate_schedule(&timing, Policy::ZbCompact, &ScheduleConfig { iterations, async_iterations }).unwrap();
        for (stage, ops) in s.stages.iter().enumerate() {
            let gaps = idle_gaps(ops);
            for o in ops {
                let ready = ready_time(&s, o);
                prop_assert!(ready <= o.start + EPS, "{:?} starts before it is ready ({})", o, ready);
                for &(a, b) in &gaps {
                    let overlap = b.min(o.start) - a.max(ready);
                    prop_assert!(overlap <= EPS, "stage {} idle over [{}, {}] while {:?} was ready at {}", stage, a, b, o, ready);
                }
            }
        }
    }

    #[test]
    fn adapter_actions_replay_from_observations(seed in any::<u64>(), window in 1usize..6, iterations in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timing = common::random_timing(&mut rng);
        let policy = common::random_policy(&mut rng);
        let trace = common::random_trace(&mut rng, timing.links.len(), 30.0);
        let cfg = sim_config(&mut rng, iterations, window);
        let report = simulate(&timing, policy, &trace, true, &cfg).unwrap();
        prop_assert_eq!(replay(&cfg.adapter, &timing, iterations, &report.observations), report.actions.clone());
        let transfers = report.observations.iter().filter(|e| matches!(e, geopipe::schedule::engine::EngineEvent::Transfer(_))).count();
        prop_assert_eq!(transfers, report.schedule.transfers.len());
    }

    #[test]
    fn sizes_stay_on_the_halving_lattice(seed in any::<u64>(), window in 1usize..6, iterations in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timing = common::random_timing(&mut rng);
        let policy = common::random_policy(&mut rng);
        let trace = common::random_trace(&mut rng, timing.links.len(), 30.0);
        let cfg = sim_config(&mut rng, iterations, window);
        let report = simulate(&timing, policy, &trace, true, &cfg).unwrap();
        let m = timing.microbatch;
        // floor(m / 2^k); exactly m / 2^k whenever m is a power of two
        let allowed: Vec<u32> = (0..=m.ilog2()).map(|k| m >> k).collect();
        for a in &report.actions {
            prop_assert!(allowed.contains(&a.old_size) && allowed.contains(&a.new_size), "{:?} with m = {}", a, m);
            match a.cause {
                Cause::Degraded | Cause::Fill | Cause::Drain => prop_assert!(a.new_size < a.old_size, "{:?}", a),
                Cause::Recovered => prop_assert!(a.new_size > a.old_size, "{:?}", a),
            }
        }
        for o in report.schedule.ops().filter(|o| o.kind.is_micro()) {
            prop_assert!(o.size() >= 1 && o.size() <= m, "{:?}", o);
        }
    }

    #[test]
    fn constant_trace_does_not_oscillate(seed in any::<u64>(), iterations in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut timing = common::random_timing(&mut rng);
        // latency at most 10% of a full micro-batch transfer
        for l in &mut timing.links {
            let payload = l.bytes(timing.microbatch) / l.bandwidth;
            l.latency = l.latency.min(payload / 9.0);
        }
        let policy = common::random_policy(&mut rng);
        let cfg = sim_config(&mut rng, iterations, 4);
        let report = simulate(&timing, policy, &NetworkTrace::constant(), true, &cfg).unwrap();
        // iteration k spans up to the last optimizer step of k
        let closes: Vec<f64> = (0..iterations)
            .map(|k| report.schedule.ops().filter(|o| o.kind == OpKind::OptimizerStep && o.iteration == k).map(|o| o.end).fold(0.0, f64::max))
            .collect();
        let mut counts = vec![vec![0usize; iterations]; timing.stages.len()];
        for a in report.actions.iter().filter(|a| matches!(a.cause, Cause::Degraded | Cause::Recovered)) {
            let k = closes.iter().position(|&c| a.time <= c).unwrap_or(iterations - 1);
            counts[a.stage][k] += 1;
        }
        for (stage, per_it) in counts.iter().enumerate() {
            for (k, &c) in per_it.iter().enumerate().skip(cfg.warmup) {
                prop_assert!(c <= 1, "stage {} adjusted {} times in iteration {}", stage, c, k);
            }
        }
    }

    #[test]
    fn one_f_one_b_respects_the_weakest_link(seed in any::<u64>(), iterations in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timing = common::random_timing(&mut rng);
        let cfg = SimConfig { iterations, warmup: 0, ..Default::default() };
        let report = simulate(&timing, Policy::OneFOneB, &NetworkTrace::constant(), false, &cfg).unwrap();
        let total = timing.batch as f64 * iterations as f64;
        prop_assert!((report.throughput - total / report.makespan).abs() <= 1e-12 * report.throughput);
        let m = timing.microbatch;
        for l in &timing.links {
            let rate = m as f64 / l.transfer_time(m);
            prop_assert!(report.throughput <= rate * (1.0 + 1e-9), "throughput {} above link rate {}", report.throughput, rate);
        }
    }

    #[test]
    fn constant_trace_reproduces_the_schedule(seed in any::<u64>(), iterations in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let timing = common::random_timing(&mut rng);
        let policy = common::random_policy(&mut rng);
        let s = generate_schedule(&timing, policy, &ScheduleConfig { iterations, async_iterations: false }).unwrap();
        let cfg = SimConfig { iterations, warmup: 0, ..Default::default() };
        let report = simulate(&timing, policy, &NetworkTrace::constant(), false, &cfg).unwrap();
        prop_assert_eq!(report.makespan, s.makespan);
        prop_assert_eq!(report.schedule, s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn planned_plans_are_well_formed(seed in any::<u64>(), fgs in 2usize..5, extra in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = fgs + extra;
        let (topo, mut model) = common::random_problem(&mut rng, fgs, layers);
        model.batch_candidates = vec![32, 64];
        model.microbatch_candidates = vec![4, 8];
        let h = common::hierarchy(&topo);
        prop_assume!(h.first_level.len() <= layers);
        let ctx = CostContext::new(&topo, &h, &model);
        let cfg = SearchConfig { seed, beam_width: 4, max_iter: 6, ..Default::default() };
        let result = search_plan(&ctx, &cfg).unwrap();
        let plan = &result.plan;
        prop_assert!(plan.validate(layers, h.first_level.len()).is_ok());
        let mut order: Vec<usize> = plan.stages.iter().map(|st| st.fg).collect();
        order.sort_unstable();
        prop_assert_eq!(order, (0..h.first_level.len()).collect::<Vec<_>>());
        prop_assert_eq!(plan.stages.first().unwrap().layers.start, 0);
        prop_assert_eq!(plan.stages.last().unwrap().layers.end, layers);
        prop_assert!(plan.stages.windows(2).all(|w| w[0].layers.end == w[1].layers.start));
        prop_assert!(ctx.memory_violations(plan).is_empty());
        prop_assert_eq!(ctx.plan_cost(plan).unwrap(), result.breakdown.clone());
        prop_assert_eq!(result.objective, result.breakdown.plan_cost / plan.batch as f64);
        for tr in &result.traces {
            prop_assert!(tr.best_costs.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}

