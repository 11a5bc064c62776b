use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use geopipe::costmodel::{CostContext, ModelSpec};
use geopipe::grouping::Hierarchy;
use geopipe::io::{self, CompareFile, CompareRow, CostFile, HierarchyFile, PlanFile, SimFile};
use geopipe::planner::{exhaustive_search, search_plan, SearchConfig};
use geopipe::profiling::{build_topology, ClusterTopology};
use geopipe::schedule::{mean_bubble_fraction, timeline, PipelineTiming, Policy};
use geopipe::simulator::{simulate, NetworkTrace, SimConfig, SimReport};

#[derive(Debug, Parser)]
#[command(name = "geopipe", version, about = "Group devices, plan, and simulate pipeline-parallel training on heterogeneous clusters")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for output files; without it the main document goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the two-level device hierarchy.
    Group {
        #[arg(long)]
        cluster: PathBuf,
        #[command(flatten)]
        thresholds: Thresholds,
    },
    /// Evaluate the cost model on an existing plan.
    Cost {
        #[command(flatten)]
        problem: Problem,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Search for a parallel plan.
    Plan {
        #[command(flatten)]
        problem: Problem,
        #[arg(long, default_value_t = 8)]
        beam_width: usize,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        /// Enumerate every candidate instead of running the beam search.
        #[arg(long)]
        exhaustive: bool,
    },
    /// Simulate one policy.
    Simulate {
        #[command(flatten)]
        pipeline: Pipeline,
        #[command(flatten)]
        run: Run,
        #[arg(long, default_value = "ZB_COMPACT")]
        policy: Policy,
    },
    /// Simulate several policies and tabulate throughput.
    Compare {
        #[command(flatten)]
        pipeline: Pipeline,
        #[command(flatten)]
        run: Run,
        /// Comma-separated policies; all four by default.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<Policy>,
    },
    /// Write a simulated run as a trace-event timeline.
    ExportTimeline {
        /// A report written by `simulate`; otherwise the run is simulated here.
        #[arg(long, conflicts_with_all = ["timing", "cluster", "model", "plan"])]
        sim: Option<PathBuf>,
        #[command(flatten)]
        pipeline: Pipeline,
        #[command(flatten)]
        run: Run,
        #[arg(long, default_value = "ZB_COMPACT")]
        policy: Policy,
    },
}

#[derive(Debug, Clone, Args)]
struct Thresholds {
    #[arg(long, default_value_t = 0.3)]
    threshold_net: f64,
    #[arg(long, default_value_t = 0.3)]
    threshold_compute: f64,
}

#[derive(Debug, Args)]
struct Problem {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    thresholds: Thresholds,
}

/// Either a timing file, or a cluster, model and plan to derive one from.
#[derive(Debug, Args)]
struct Pipeline {
    #[arg(long, conflicts_with_all = ["cluster", "model", "plan"])]
    timing: Option<PathBuf>,
    #[arg(long, requires_all = ["model", "plan"])]
    cluster: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    plan: Option<PathBuf>,
    #[command(flatten)]
    thresholds: Thresholds,
    /// Duration of each stage's optimizer step, in seconds.
    #[arg(long, default_value_t = 0.0)]
    optimizer_seconds: f64,
}

#[derive(Debug, Args)]
struct Run {
    /// Bandwidth trace; constant bandwidth when absent.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    iterations: usize,
    /// Leading iterations excluded from throughput.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Enable runtime micro-batch resizing (in `compare`: add adapter-on rows).
    #[arg(long)]
    adapter: bool,
    #[arg(long, default_value_t = 20)]
    window: usize,
    #[arg(long)]
    async_iterations: bool,
}

impl Run {
    fn config(&self) -> SimConfig {
        let mut cfg = SimConfig {
            iterations: self.iterations,
            warmup: self.warmup,
            async_iterations: self.async_iterations,
            ..SimConfig::default()
        };
        cfg.adapter.window = self.window;
        cfg
    }

    fn trace(&self) -> Result<NetworkTrace> {
        match &self.trace {
            None => Ok(NetworkTrace::constant()),
            Some(p) => Ok(NetworkTrace::new(&io::read_trace(p)?.records).with_context(|| p.display().to_string())?),
        }
    }
}

fn load_topology(path: &Path) -> Result<ClusterTopology> {
    let file = io::read_cluster(path)?;
    build_topology(&file.devices, &file.links).with_context(|| format!("{}: building topology", path.display()))
}

fn hierarchy(topo: &ClusterTopology, t: &Thresholds) -> Result<Hierarchy> {
    Ok(Hierarchy::build(topo, t.threshold_net, t.threshold_compute)?)
}

fn load_problem(p: &Problem) -> Result<(ClusterTopology, Hierarchy, ModelSpec)> {
    let topo = load_topology(&p.cluster)?;
    let h = hierarchy(&topo, &p.thresholds)?;
    let model = io::read_model(&p.model)?;
    Ok((topo, h, model))
}

impl Pipeline {
    fn timing(&self) -> Result<PipelineTiming> {
        if let Some(path) = &self.timing {
            return Ok(io::read_timing(path)?);
        }
        let (Some(cluster), Some(model), Some(plan)) = (&self.cluster, &self.model, &self.plan) else {
            bail!("give either --timing, or all of --cluster, --model and --plan");
        };
        let problem = Problem {
            cluster: cluster.clone(),
            model: model.clone(),
            thresholds: self.thresholds.clone(),
        };
        let (topo, h, model) = load_problem(&problem)?;
        let plan = io::read_plan(plan)?;
        let ctx = CostContext::new(&topo, &h, &model);
        Ok(ctx.pipeline_timing(&plan.plan, self.optimizer_seconds)?)
    }
}

/// Writes `body` to `<out>/<name>`, or to stdout without `--out`.
fn emit(out: Option<&Path>, name: &str, body: &str) -> Result<()> {
    match out {
        None => print!("{body}"),
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn cmd_group(cluster: &Path, t: &Thresholds, out: Option<&Path>) -> Result<()> {
    let topo = load_topology(cluster)?;
    let h = hierarchy(&topo, t)?;
    eprintln!("{} devices in {} first-level groups", topo.len(), h.first_level.len());
    for fg in &h.first_level {
        let sgs: Vec<String> = h.sgs(fg.id).iter().map(|s| format!("[{}]", s.member_ids.join(" "))).collect();
        eprintln!("  FG{} {{{}}}: {}", fg.id, fg.member_ids.join(", "), sgs.join(" "));
    }
    let file = HierarchyFile {
        schema: io::HIERARCHY_SCHEMA.into(),
        devices: (0..topo.len()).map(|i| topo.id(i).to_string()).collect(),
        hierarchy: h.clone(),
    };
    emit(out, "hierarchy.json", &io::to_json(&file))?;
    if out.is_some() {
        emit(out, "hierarchy.dot", &h.to_dot(&topo))?;
    }
    Ok(())
}

fn cmd_cost(problem: &Problem, plan: &Path, out: Option<&Path>) -> Result<()> {
    let (topo, h, model) = load_problem(problem)?;
    let plan = io::read_plan(plan)?.plan;
    let ctx = CostContext::new(&topo, &h, &model);
    let breakdown = ctx.plan_cost(&plan)?;
    warn_all(&breakdown.warnings);
    eprintln!("plan cost {:.6} s per iteration", breakdown.plan_cost);
    let file = CostFile {
        schema: io::COST_SCHEMA.into(),
        plan,
        breakdown,
    };
    emit(out, "cost.json", &io::to_json(&file))
}

fn cmd_plan(problem: &Problem, config: &SearchConfig, exhaustive: bool, out: Option<&Path>) -> Result<()> {
    let (topo, h, model) = load_problem(problem)?;
    let ctx = CostContext::new(&topo, &h, &model);
    let result = if exhaustive { exhaustive_search(&ctx)? } else { search_plan(&ctx, config)? };
    warn_all(&result.warnings);
    eprintln!(
        "batch {} micro-batch {}: {} stages, {:.6} s per iteration ({} evaluations)",
        result.plan.batch,
        result.plan.microbatch,
        result.plan.stages.len(),
        result.breakdown.plan_cost,
        result.evaluations
    );
    let file = PlanFile {
        schema: io::PLAN_SCHEMA.into(),
        plan: result.plan,
        breakdown: result.breakdown,
        objective: result.objective,
        traces: result.traces,
        warnings: result.warnings,
    };
    emit(out, "plan.json", &io::to_json(&file))
}

fn run_one(timing: &PipelineTiming, policy: Policy, trace: &NetworkTrace, adapter: bool, cfg: &SimConfig) -> Result<SimReport> {
    simulate(timing, policy, trace, adapter, cfg).with_context(|| format!("simulating {policy}"))
}

fn cmd_simulate(pipeline: &Pipeline, run: &Run, policy: Policy, out: Option<&Path>) -> Result<()> {
    let timing = pipeline.timing()?;
    let report = run_one(&timing, policy, &run.trace()?, run.adapter, &run.config())?;
    eprintln!(
        "{}: makespan {:.4} s, throughput {:.4} samples/s, {} adapter actions",
        report.policy_label,
        report.makespan,
        report.throughput,
        report.actions.len()
    );
    let file = SimFile {
        schema: io::SIM_SCHEMA.into(),
        report,
    };
    emit(out, "sim.json", &io::to_json(&file))
}

fn compare_rows(timing: &PipelineTiming, policies: &[Policy], run: &Run) -> Result<Vec<CompareRow>> {
    let trace = run.trace()?;
    let cfg = run.config();
    let modes: &[bool] = if run.adapter { &[false, true] } else { &[false] };
    let jobs: Vec<(Policy, bool)> = policies.iter().flat_map(|&p| modes.iter().map(move |&a| (p, a))).collect();
    // independent runs; results are collected in job order
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(p, a)| {
                let (timing, trace, cfg) = (timing, &trace, &cfg);
                scope.spawn(move || run_one(timing, p, trace, a, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                let r = h.join().expect("simulation thread panicked")?;
                Ok(CompareRow {
                    policy: r.policy_label.clone(),
                    adapter: r.adapter_enabled,
                    makespan_s: r.makespan,
                    throughput: r.throughput,
                    mean_bubble: mean_bubble_fraction(&r.schedule),
                    actions: r.actions.len(),
                })
            })
            .collect()
    })
}

fn cmd_compare(pipeline: &Pipeline, run: &Run, policies: &[Policy], out: Option<&Path>) -> Result<()> {
    let timing = pipeline.timing()?;
    let policies = if policies.is_empty() { Policy::ALL.to_vec() } else { policies.to_vec() };
    let rows = compare_rows(&timing, &policies, run)?;
    eprintln!("{:<24} {:>7} {:>12} {:>12} {:>8}", "policy", "adapter", "makespan_s", "samples/s", "bubble");
    for r in &rows {
        eprintln!(
            "{:<24} {:>7} {:>12.4} {:>12.4} {:>8.4}",
            r.policy,
            if r.adapter { "on" } else { "off" },
            r.makespan_s,
            r.throughput,
            r.mean_bubble
        );
    }
    let file = CompareFile {
        schema: io::COMPARE_SCHEMA.into(),
        rows,
    };
    emit(out, "compare.json", &io::to_json(&file))?;
    if let Some(dir) = out {
        let path = dir.join("compare.csv");
        io::write_compare_csv(&path, &file.rows)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_export_timeline(sim: Option<&Path>, pipeline: &Pipeline, run: &Run, policy: Policy, out: Option<&Path>) -> Result<()> {
    let schedule = match sim {
        Some(path) => io::read_json::<SimFile>(path, io::SIM_SCHEMA)?.report.schedule,
        None => run_one(&pipeline.timing()?, policy, &run.trace()?, run.adapter, &run.config())?.schedule,
    };
    let mut body = timeline::to_trace_json(&schedule);
    body.push('\n');
    emit(out, "timeline.json", &body)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Group { cluster, thresholds } => cmd_group(cluster, thresholds, out),
        Command::Cost { problem, plan } => cmd_cost(problem, plan, out),
        Command::Plan {
            problem,
            beam_width,
            max_iter,
            exhaustive,
        } => {
            let config = SearchConfig {
                beam_width: *beam_width,
                max_iter: *max_iter,
                seed: cli.seed,
                net_threshold: problem.thresholds.threshold_net,
                compute_threshold: problem.thresholds.threshold_compute,
            };
            cmd_plan(problem, &config, *exhaustive, out)
        }
        Command::Simulate { pipeline, run, policy } => cmd_simulate(pipeline, run, *policy, out),
        Command::Compare { pipeline, run, policy } => cmd_compare(pipeline, run, policy, out),
        Command::ExportTimeline {
            sim,
            pipeline,
            run,
            policy,
        } => cmd_export_timeline(sim.as_deref(), pipeline, run, *policy, out),
    }
}
