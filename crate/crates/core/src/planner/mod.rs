//! Plan search: beam search over batch size, micro-batch size, stage order and
//! layer cuts, plus the per-stage second-level split.

pub mod split;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costmodel::{CostBreakdown, CostContext, IntraSplit, LayerRange, LayerSpec, ParallelPlan, StageAssignment};
use crate::error::{Error, Result};
use crate::grouping::DEFAULT_THRESHOLD;

pub use split::{largest_remainder, split_asymmetric_dp, split_asymmetric_pp, split_asymmetric_tp_dp, split_samples};

/// A sub-stage slower than this multiple of the mean rules out layer
/// pipelining inside a group.
pub const PP_IMBALANCE_LIMIT: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub net_threshold: f64,
    pub compute_threshold: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 8,
            max_iter: 20,
            seed: 0,
            net_threshold: DEFAULT_THRESHOLD,
            compute_threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_iter == 0 {
            return Err(Error::InvalidPlan("beam width and iteration count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stage order over FG indices plus interior cut points: stage `k` holds
/// layers `[cuts[k-1], cuts[k])` with the outer bounds 0 and the layer count.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Candidate {
    pub order: Vec<usize>,
    pub cuts: Vec<usize>,
}

impl Candidate {
    pub fn ranges(&self, layers: usize) -> Vec<LayerRange> {
        let mut bounds = Vec::with_capacity(self.cuts.len() + 2);
        bounds.push(0);
        bounds.extend_from_slice(&self.cuts);
        bounds.push(layers);
        bounds.windows(2).map(|w| LayerRange::new(w[0], w[1])).collect()
    }

    pub fn is_valid(&self, layers: usize) -> bool {
        self.cuts.len() + 1 == self.order.len()
            && self.cuts.first().is_none_or(|&c| c > 0)
            && self.cuts.last().is_none_or(|&c| c < layers)
            && self.cuts.windows(2).all(|w| w[0] < w[1])
    }

    fn from_counts(order: Vec<usize>, counts: &[usize]) -> Self {
        let mut cuts = Vec::with_capacity(counts.len().saturating_sub(1));
        let mut acc = 0;
        for c in &counts[..counts.len() - 1] {
            acc += c;
            cuts.push(acc);
        }
        Self { order, cuts }
    }
}

/// Picks how a stage's work is spread over its FG's second-level groups.
pub fn choose_intra_split(ctx: &CostContext<'_>, fg: usize, layers: LayerRange) -> IntraSplit {
    let sgs = ctx.hierarchy.sgs(fg);
    if sgs.len() < 2 {
        return IntraSplit::Uniform;
    }
    let caps: Vec<f64> = sgs.iter().map(|s| s.aggregate_capacity).collect();
    let mut reason = format!("{} second-level groups for {} layers", sgs.len(), layers.len());
    if let Ok(parts) = split_asymmetric_pp(layers, &caps) {
        let times: Vec<f64> = parts
            .iter()
            .map(|p| {
                ctx.model.layers[p.layers.start..p.layers.end]
                    .iter()
                    .map(LayerSpec::total_flops)
                    .sum::<f64>()
                    / caps[p.sg]
            })
            .collect();
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let max = times.iter().copied().fold(0.0, f64::max);
        if max <= PP_IMBALANCE_LIMIT * mean {
            return IntraSplit::AsymmetricPp { parts };
        }
        reason = format!("sub-stage imbalance {:.3} exceeds {PP_IMBALANCE_LIMIT}", max / mean);
    }
    let devices: Vec<(usize, f64)> = ctx
        .hierarchy
        .fg(fg)
        .members
        .iter()
        .map(|&d| (d, ctx.topology.p_c(d)))
        .collect();
    match split_asymmetric_tp_dp(&devices, [1.0, 1.0]) {
        Ok((grid, tiles)) => IntraSplit::AsymmetricTpDp { grid, tiles },
        Err(e) => IntraSplit::AsymmetricDp {
            fractions: split_asymmetric_dp(&caps).expect("positive SG capacities"),
            fallback: Some(format!("{reason}; {e}")),
        },
    }
}

pub fn candidate_plan(ctx: &CostContext<'_>, cand: &Candidate, batch: u32, microbatch: u32) -> ParallelPlan {
    let stages = cand
        .order
        .iter()
        .zip(cand.ranges(ctx.model.layers.len()))
        .map(|(&fg, layers)| StageAssignment {
            fg,
            layers,
            split: choose_intra_split(ctx, fg, layers),
        })
        .collect();
    ParallelPlan {
        stages,
        batch,
        microbatch,
    }
}

fn evaluate(ctx: &CostContext<'_>, cand: &Candidate, batch: u32, microbatch: u32) -> f64 {
    ctx.plan_cost(&candidate_plan(ctx, cand, batch, microbatch))
        .map(|b| b.plan_cost)
        .unwrap_or(f64::INFINITY)
}

/// Up to `l` distinct candidates: capacity-proportional cuts over random FG
/// orders, then jittered cuts.
pub fn initial_candidates(layers: usize, fg_caps: &[f64], l: usize, rng: &mut impl Rng) -> Result<Vec<Candidate>> {
    let n = fg_caps.len();
    if n == 0 {
        return Err(Error::InfeasibleSplit("no first-level groups".into()));
    }
    if n > layers {
        return Err(Error::InfeasibleSplit(format!("{n} first-level groups but only {layers} layers")));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |c: Candidate, out: &mut Vec<Candidate>| {
        if out.len() < l && seen.insert(c.clone()) {
            out.push(c);
        }
    };
    let attempts = 50 * l.max(1);
    for attempt in 0..attempts {
        if out.len() >= l {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let caps: Vec<f64> = order.iter().map(|&g| fg_caps[g]).collect();
        let counts = largest_remainder(layers, &caps, 1)?;
        let mut cand = Candidate::from_counts(order, &counts);
        if attempt >= l.min(factorial(n)) {
            for _ in 0..rng.random_range(1..=3) {
                if cand.cuts.is_empty() {
                    break;
                }
                let k = rng.random_range(0..cand.cuts.len());
                let up = rng.random_bool(0.5);
                let shifted = shift(&cand, k, up, layers);
                if let Some(s) = shifted {
                    cand = s;
                }
            }
        }
        push(cand, &mut out);
    }
    Ok(out)
}

fn factorial(n: usize) -> usize {
    (1..=n).product::<usize>().max(1)
}

fn shift(c: &Candidate, k: usize, up: bool, layers: usize) -> Option<Candidate> {
    let mut cuts = c.cuts.clone();
    if up {
        cuts[k] += 1;
    } else {
        cuts[k] = cuts[k].checked_sub(1)?;
    }
    let next = Candidate {
        order: c.order.clone(),
        cuts,
    };
    next.is_valid(layers).then_some(next)
}

/// Each candidate, one random stage transposition of it, and every valid ±1
/// shift of each cut; duplicates removed, first occurrence kept.
pub fn expand_candidates(cands: &[Candidate], layers: usize, rng: &mut impl Rng) -> Vec<Candidate> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in cands {
        let mut emit = |x: Candidate| {
            if seen.insert(x.clone()) {
                out.push(x);
            }
        };
        emit(c.clone());
        let s = c.order.len();
        if s >= 2 {
            let i = rng.random_range(0..s);
            let mut j = rng.random_range(0..s - 1);
            if j >= i {
                j += 1;
            }
            let mut order = c.order.clone();
            order.swap(i, j);
            emit(Candidate {
                order,
                cuts: c.cuts.clone(),
            });
        }
        for k in 0..c.cuts.len() {
            for up in [false, true] {
                if let Some(x) = shift(c, k, up, layers) {
                    emit(x);
                }
            }
        }
    }
    out
}

/// Best cost after each beam round for one `(batch, microbatch)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamTrace {
    pub batch: u32,
    pub microbatch: u32,
    pub best_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub plan: ParallelPlan,
    pub breakdown: CostBreakdown,
    /// `plan_cost / batch`: seconds per sample, comparable across batch sizes.
    pub objective: f64,
    pub traces: Vec<BeamTrace>,
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn batch_pairs(ctx: &CostContext<'_>, warnings: &mut Vec<String>) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for &b in &ctx.model.batch_candidates {
        for &m in &ctx.model.microbatch_candidates {
            if m == 0 || b % m != 0 {
                warnings.push(format!("skipping batch {b} with micro-batch {m}: not a divisor"));
            } else {
                pairs.push((b, m));
            }
        }
    }
    pairs
}

fn sort_key(a: &(f64, Candidate), b: &(f64, Candidate)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1))
}

fn finish(
    ctx: &CostContext<'_>,
    best: Option<(f64, Candidate, u32, u32)>,
    traces: Vec<BeamTrace>,
    evaluations: usize,
    mut warnings: Vec<String>,
) -> Result<PlanResult> {
    let Some((objective, cand, b, m)) = best.filter(|x| x.0.is_finite()) else {
        return Err(Error::NoFeasiblePlan(if warnings.is_empty() {
            "every candidate violates a device memory limit".into()
        } else {
            warnings.join("; ")
        }));
    };
    let plan = candidate_plan(ctx, &cand, b, m);
    let breakdown = ctx.plan_cost(&plan)?;
    warnings.extend(breakdown.warnings.iter().cloned());
    Ok(PlanResult {
        plan,
        breakdown,
        objective,
        traces,
        evaluations,
        warnings,
    })
}

/// Beam search for every `(batch, microbatch)` pair; the pair and candidate
/// with the lowest cost per sample wins.
pub fn search_plan(ctx: &CostContext<'_>, config: &SearchConfig) -> Result<PlanResult> {
    config.validate()?;
    ctx.model.validate()?;
    let layers = ctx.model.layers.len();
    let caps: Vec<f64> = ctx.hierarchy.first_level.iter().map(|g| g.aggregate_capacity).collect();
    let mut warnings = Vec::new();
    let pairs = batch_pairs(ctx, &mut warnings);
    let mut traces = Vec::new();
    let mut evaluations = 0;
    let mut best: Option<(f64, Candidate, u32, u32)> = None;
    for (pair_idx, &(b, m)) in pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(pair_idx as u64));
        let mut beam: Vec<(f64, Candidate)> = initial_candidates(layers, &caps, config.beam_width, &mut rng)?
            .into_par_iter()
            .map(|c| (evaluate(ctx, &c, b, m), c))
            .collect();
        evaluations += beam.len();
        beam.sort_by(sort_key);
        let mut trace = Vec::with_capacity(config.max_iter);
        for _ in 0..config.max_iter {
            let pool: Vec<Candidate> = beam.iter().map(|x| x.1.clone()).collect();
            let expanded = expand_candidates(&pool, layers, &mut rng);
            evaluations += expanded.len();
            beam = expanded.into_par_iter().map(|c| (evaluate(ctx, &c, b, m), c)).collect();
            beam.sort_by(sort_key);
            beam.truncate(config.beam_width);
            trace.push(beam[0].0);
        }
        let (cost, cand) = beam.swap_remove(0);
        if !cost.is_finite() {
            warnings.push(format!("batch {b} micro-batch {m}: no memory-feasible plan found"));
        }
        let objective = cost / b as f64;
        if best.as_ref().is_none_or(|x| objective < x.0) {
            best = Some((objective, cand, b, m));
        }
        traces.push(BeamTrace {
            batch: b,
            microbatch: m,
            best_costs: trace,
        });
    }
    finish(ctx, best, traces, evaluations, warnings)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                go(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Strictly increasing cut vectors of length `k` within `1..layers`.
fn cut_sets(layers: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(from: usize, layers: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for c in from..layers {
            cur.push(c);
            go(c + 1, layers, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(1, layers, k, &mut Vec::new(), &mut out);
    out
}

/// Every stage order × layer cut × `(batch, microbatch)`; only practical for
/// a handful of groups and layers.
pub fn exhaustive_search(ctx: &CostContext<'_>) -> Result<PlanResult> {
    ctx.model.validate()?;
    let layers = ctx.model.layers.len();
    let n = ctx.hierarchy.first_level.len();
    if n > layers {
        return Err(Error::InfeasibleSplit(format!("{n} first-level groups but only {layers} layers")));
    }
    let mut warnings = Vec::new();
    let pairs = batch_pairs(ctx, &mut warnings);
    let mut cands = Vec::new();
    let cuts = cut_sets(layers, n - 1);
    for order in permutations(n) {
        for c in &cuts {
            cands.push(Candidate {
                order: order.clone(),
                cuts: c.clone(),
            });
        }
    }
    let mut best: Option<(f64, Candidate, u32, u32)> = None;
    let mut evaluations = 0;
    for &(b, m) in &pairs {
        let scored: Vec<(f64, Candidate)> = cands
            .par_iter()
            .map(|c| (evaluate(ctx, c, b, m) / b as f64, c.clone()))
            .collect();
        evaluations += scored.len();
        if let Some(top) = scored.into_iter().min_by(sort_key) {
            if best.as_ref().is_none_or(|x| top.0 < x.0) {
                best = Some((top.0, top.1, b, m));
            }
        }
    }
    finish(ctx, best, Vec::new(), evaluations, warnings)
}
