//! Two-level device hierarchy.
//!
//! First-level groups (FGs) cluster devices whose interconnect is homogeneous;
//! second-level groups (SGs) then cluster each FG's devices by compute
//! capacity. Both levels run the same agglomerative procedure: every device
//! starts as a singleton, candidate pairs sit in a max-heap keyed by how
//! attractive the merge is, and each pop either merges the pair or discards it
//! for good. Only the final top-level groups are returned.
//!
//! Device indices follow the topology's id ordering, so "smallest index" and
//! "lexicographically smallest id" coincide for tie-breaking.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profiling::ClusterTopology;

pub const DEFAULT_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstLevelGroup {
    pub id: usize,
    pub members: Vec<usize>,
    pub member_ids: Vec<String>,
    /// Mean pairwise `p_t` among members; `None` for singletons.
    pub intra_metric: Option<f64>,
    pub aggregate_capacity: f64,
    /// Slowest member-pair bandwidth; `None` for singletons.
    pub min_intra_bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondLevelGroup {
    /// Index within the parent FG.
    pub id: usize,
    pub parent: usize,
    pub members: Vec<usize>,
    pub member_ids: Vec<String>,
    pub aggregate_capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Network,
    Compute,
}

/// One accepted merge, with the capability values compared at merge time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub level: Level,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub values: Vec<f64>,
    pub spread: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub first_level: Vec<FirstLevelGroup>,
    /// `second_level[fg.id]` partitions that FG.
    pub second_level: Vec<Vec<SecondLevelGroup>>,
    pub audit: Vec<MergeRecord>,
}

impl Hierarchy {
    pub fn build(topo: &ClusterTopology, net_threshold: f64, compute_threshold: f64) -> Result<Self> {
        let (first_level, mut audit) = group_first_level_audited(topo, net_threshold)?;
        let mut second_level = Vec::with_capacity(first_level.len());
        for fg in &first_level {
            let (sgs, log) = group_second_level_audited(fg, topo, compute_threshold)?;
            audit.extend(log);
            second_level.push(sgs);
        }
        Ok(Self {
            first_level,
            second_level,
            audit,
        })
    }

    pub fn fg(&self, id: usize) -> &FirstLevelGroup {
        &self.first_level[id]
    }

    pub fn sgs(&self, fg: usize) -> &[SecondLevelGroup] {
        &self.second_level[fg]
    }

    /// Graphviz rendering: one cluster per FG, one node per device, SGs as
    /// node colors.
    pub fn to_dot(&self, topo: &ClusterTopology) -> String {
        const PALETTE: [&str; 6] = ["lightblue", "palegreen", "khaki", "salmon", "plum", "lightgray"];
        let mut out = String::from("graph hierarchy {\n  node [style=filled];\n");
        for fg in &self.first_level {
            let _ = writeln!(out, "  subgraph cluster_fg{} {{\n    label=\"FG{}\";", fg.id, fg.id);
            for sg in &self.second_level[fg.id] {
                for &d in &sg.members {
                    let _ = writeln!(
                        out,
                        "    \"{}\" [label=\"{}\\np_c={:.3}\" fillcolor={}];",
                        topo.id(d),
                        topo.id(d),
                        topo.p_c(d),
                        PALETTE[sg.id % PALETTE.len()]
                    );
                }
            }
            out.push_str("  }\n");
        }
        for i in 0..topo.len() {
            for j in i + 1..topo.len() {
                let _ = writeln!(out, "  \"{}\" -- \"{}\" [label=\"{:.4}\"];", topo.id(i), topo.id(j), topo.p_t(i, j));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(t))
    }
}

fn relative_spread(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    let min = values.iter().copied().fold(f64::MAX, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

/// Mean `p_t` over all cross pairs of two disjoint groups.
pub fn group_pair_metric(a: &[usize], b: &[usize], topo: &ClusterTopology) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidPair("groups must be non-empty".into()));
    }
    if a.iter().any(|x| b.contains(x)) {
        return Err(Error::InvalidPair(format!("{a:?} and {b:?} overlap")));
    }
    let mut sum = 0.0;
    for &u in a {
        for &v in b {
            sum += topo.p_t(u, v);
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

fn intra_mean(members: &[usize], topo: &ClusterTopology) -> Option<f64> {
    if members.len() < 2 {
        return None;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, &u) in members.iter().enumerate() {
        for &v in &members[k + 1..] {
            sum += topo.p_t(u, v);
            count += 1;
        }
    }
    Some(sum / count as f64)
}

fn min_bandwidth(members: &[usize], topo: &ClusterTopology) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (k, &u) in members.iter().enumerate() {
        for &v in &members[k + 1..] {
            let bw = topo.link(u, v).bandwidth_bps;
            best = Some(best.map_or(bw, |b: f64| b.min(bw)));
        }
    }
    best
}

/// A live cluster during agglomeration.
#[derive(Debug, Clone)]
struct Cluster {
    members: Vec<usize>,
    alive: bool,
}

#[derive(Debug, Clone)]
struct HeapEntry {
    /// Higher pops first.
    priority: f64,
    /// (smaller min member, larger min member); smaller pops first on ties.
    tie: (usize, usize),
    a: usize,
    b: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tie.cmp(&self.tie))
    }
}

/// Level-specific scoring used by the shared agglomeration loop.
trait Criterion {
    /// Heap priority of merging `a` and `b` (higher = more attractive).
    fn priority(&self, a: &[usize], b: &[usize]) -> f64;
    /// Capability values compared by the merge predicate.
    fn merge_values(&self, a: &[usize], b: &[usize]) -> Vec<f64>;
}

struct NetworkCriterion<'a> {
    topo: &'a ClusterTopology,
}

impl Criterion for NetworkCriterion<'_> {
    fn priority(&self, a: &[usize], b: &[usize]) -> f64 {
        1.0 / group_pair_metric(a, b, self.topo).expect("live clusters are disjoint")
    }

    // The candidate link joins the comparison so that two internally fast
    // groups joined by a slow link stay apart. A singleton has no intra value
    // and contributes the cross value itself.
    fn merge_values(&self, a: &[usize], b: &[usize]) -> Vec<f64> {
        let cross = group_pair_metric(a, b, self.topo).expect("live clusters are disjoint");
        let va = intra_mean(a, self.topo).unwrap_or(cross);
        let vb = intra_mean(b, self.topo).unwrap_or(cross);
        vec![va, vb, cross]
    }
}

struct ComputeCriterion<'a> {
    topo: &'a ClusterTopology,
}

impl ComputeCriterion<'_> {
    fn value(&self, members: &[usize]) -> f64 {
        members.iter().map(|&d| self.topo.p_c(d)).sum::<f64>() / members.len() as f64
    }
}

impl Criterion for ComputeCriterion<'_> {
    fn priority(&self, a: &[usize], b: &[usize]) -> f64 {
        -relative_spread(&self.merge_values(a, b))
    }

    fn merge_values(&self, a: &[usize], b: &[usize]) -> Vec<f64> {
        vec![self.value(a), self.value(b)]
    }
}

fn agglomerate(
    items: &[usize],
    criterion: &dyn Criterion,
    threshold: f64,
    level: Level,
) -> (Vec<Vec<usize>>, Vec<MergeRecord>) {
    let mut clusters: Vec<Cluster> = items
        .iter()
        .map(|&d| Cluster {
            members: vec![d],
            alive: true,
        })
        .collect();
    let mut heap = BinaryHeap::new();
    let entry = |clusters: &[Cluster], a: usize, b: usize| {
        let (ma, mb) = (clusters[a].members[0], clusters[b].members[0]);
        HeapEntry {
            priority: criterion.priority(&clusters[a].members, &clusters[b].members),
            tie: (ma.min(mb), ma.max(mb)),
            a,
            b,
        }
    };
    for a in 0..clusters.len() {
        for b in a + 1..clusters.len() {
            heap.push(entry(&clusters, a, b));
        }
    }

    let mut audit = Vec::new();
    while let Some(top) = heap.pop() {
        if !clusters[top.a].alive || !clusters[top.b].alive {
            continue;
        }
        let values = criterion.merge_values(&clusters[top.a].members, &clusters[top.b].members);
        let spread = relative_spread(&values);
        if spread >= threshold {
            continue;
        }
        audit.push(MergeRecord {
            level,
            left: clusters[top.a].members.clone(),
            right: clusters[top.b].members.clone(),
            values,
            spread,
            threshold,
        });
        let mut members = clusters[top.a].members.clone();
        members.extend_from_slice(&clusters[top.b].members);
        members.sort_unstable();
        clusters[top.a].alive = false;
        clusters[top.b].alive = false;
        let merged = clusters.len();
        clusters.push(Cluster { members, alive: true });
        for other in 0..merged {
            if clusters[other].alive {
                heap.push(entry(&clusters, other, merged));
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = clusters.into_iter().filter(|c| c.alive).map(|c| c.members).collect();
    groups.sort_by_key(|g| g[0]);
    (groups, audit)
}

pub fn group_first_level(topo: &ClusterTopology, threshold: f64) -> Result<Vec<FirstLevelGroup>> {
    group_first_level_audited(topo, threshold).map(|(g, _)| g)
}

pub fn group_first_level_audited(
    topo: &ClusterTopology,
    threshold: f64,
) -> Result<(Vec<FirstLevelGroup>, Vec<MergeRecord>)> {
    check_threshold(threshold)?;
    if topo.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let items: Vec<usize> = (0..topo.len()).collect();
    let (groups, audit) = agglomerate(&items, &NetworkCriterion { topo }, threshold, Level::Network);
    let fgs = groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| FirstLevelGroup {
            id,
            member_ids: members.iter().map(|&d| topo.id(d).to_string()).collect(),
            intra_metric: intra_mean(&members, topo),
            aggregate_capacity: members.iter().map(|&d| topo.p_c(d)).sum(),
            min_intra_bandwidth: min_bandwidth(&members, topo),
            members,
        })
        .collect();
    Ok((fgs, audit))
}

pub fn group_second_level(
    fg: &FirstLevelGroup,
    topo: &ClusterTopology,
    threshold: f64,
) -> Result<Vec<SecondLevelGroup>> {
    group_second_level_audited(fg, topo, threshold).map(|(g, _)| g)
}

pub fn group_second_level_audited(
    fg: &FirstLevelGroup,
    topo: &ClusterTopology,
    threshold: f64,
) -> Result<(Vec<SecondLevelGroup>, Vec<MergeRecord>)> {
    check_threshold(threshold)?;
    if fg.members.is_empty() {
        return Err(Error::DegenerateGroup {
            group: format!("FG{}", fg.id),
            reason: "no members".into(),
        });
    }
    let (groups, audit) = agglomerate(&fg.members, &ComputeCriterion { topo }, threshold, Level::Compute);
    let sgs = groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| SecondLevelGroup {
            id,
            parent: fg.id,
            member_ids: members.iter().map(|&d| topo.id(d).to_string()).collect(),
            aggregate_capacity: members.iter().map(|&d| topo.p_c(d)).sum(),
            members,
        })
        .collect();
    Ok((sgs, audit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiling::{build_topology, DeviceSpec, LinkMeasurement};
    use proptest::prelude::*;

    /// Topology where `p_t(i, j) = pt(i, j)` exactly (beta = 0 is not allowed,
    /// so beta is negligible against a huge payload).
    fn topo_from(caps: &[f64], pt: impl Fn(usize, usize) -> f64) -> ClusterTopology {
        let ids: Vec<String> = (0..caps.len()).map(|i| format!("d{i:02}")).collect();
        let devices: Vec<_> = ids
            .iter()
            .zip(caps)
            .map(|(id, &c)| DeviceSpec::with_capacity(id.clone(), 1 << 34, c))
            .collect();
        let mut ms = Vec::new();
        for i in 0..caps.len() {
            for j in i + 1..caps.len() {
                ms.push(LinkMeasurement::new(ids[i].clone(), ids[j].clone(), pt(i, j), 1e-30, 1e6).with_raw(1e-3, 1e9 / pt(i, j)));
            }
        }
        build_topology(&devices, &ms).unwrap()
    }

    fn member_sets(fgs: &[FirstLevelGroup]) -> Vec<Vec<usize>> {
        fgs.iter().map(|g| g.members.clone()).collect()
    }

    /// Brute-force oracle for clique structure: connected components of the
    /// graph keeping only edges whose p_t is within `threshold` of the
    /// fastest edge.
    fn components_of_fast_edges(n: usize, pt: impl Fn(usize, usize) -> f64, threshold: f64) -> Vec<Vec<usize>> {
        let best = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| pt(i, j))
            .fold(f64::MAX, f64::min);
        let mut label: Vec<usize> = (0..n).collect();
        for _ in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if i != j && (pt(i.min(j), i.max(j)) - best) / pt(i.min(j), i.max(j)) < threshold {
                        let m = label[i].min(label[j]);
                        label[i] = m;
                        label[j] = m;
                    }
                }
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for l in 0..n {
            let g: Vec<usize> = (0..n).filter(|&i| label[i] == l).collect();
            if !g.is_empty() {
                groups.push(g);
            }
        }
        groups
    }

    fn three_cliques(i: usize, j: usize) -> f64 {
        if i / 4 == j / 4 {
            0.01
        } else {
            1.0
        }
    }

    #[test]
    fn single_device_is_one_group() {
        let t = topo_from(&[1.0], |_, _| 1.0);
        let fgs = group_first_level(&t, 0.3).unwrap();
        assert_eq!(member_sets(&fgs), vec![vec![0]]);
        assert_eq!(fgs[0].intra_metric, None);
        assert_eq!(fgs[0].min_intra_bandwidth, None);
    }

    #[test]
    fn three_cliques_yield_three_groups() {
        let t = topo_from(&[1.0; 12], three_cliques);
        let fgs = group_first_level(&t, 0.3).unwrap();
        let oracle = components_of_fast_edges(12, three_cliques, 0.3);
        assert_eq!(oracle.len(), 3);
        assert_eq!(member_sets(&fgs), oracle);
        for g in &fgs {
            assert!((g.intra_metric.unwrap() - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_metric_merges_everything() {
        let t = topo_from(&[1.0; 7], |_, _| 0.5);
        let fgs = group_first_level(&t, 0.3).unwrap();
        assert_eq!(fgs.len(), 1);
        assert_eq!(fgs[0].members.len(), 7);
    }

    #[test]
    fn empty_cluster_errors() {
        let t = build_topology(&[], &[]).unwrap();
        assert!(matches!(group_first_level(&t, 0.3), Err(Error::EmptyCluster)));
    }

    #[test]
    fn threshold_is_validated() {
        let t = topo_from(&[1.0; 2], |_, _| 0.5);
        assert!(matches!(group_first_level(&t, 0.0), Err(Error::InvalidThreshold(_))));
        assert!(matches!(group_first_level(&t, 1.0), Err(Error::InvalidThreshold(_))));
    }

    fn single_fg(t: &ClusterTopology) -> FirstLevelGroup {
        let fgs = group_first_level(t, 0.3).unwrap();
        assert_eq!(fgs.len(), 1);
        fgs[0].clone()
    }

    #[test]
    fn homogeneous_compute_is_one_sg() {
        let t = topo_from(&[10.0, 10.0, 10.0], |_, _| 0.1);
        let sgs = group_second_level(&single_fg(&t), &t, 0.3).unwrap();
        assert_eq!(sgs.len(), 1);
        assert_eq!(sgs[0].members, vec![0, 1, 2]);
        assert!((sgs[0].aggregate_capacity - 30.0).abs() < 1e-12);
    }

    /// Every merge order over the five devices that respects the threshold
    /// ends in the same partition here, so brute force gives a unique answer.
    #[test]
    fn mixed_compute_matches_enumeration() {
        let caps = [10.0, 10.0, 5.0, 5.0, 1.0];
        let t = topo_from(&caps, |_, _| 0.1);
        let sgs = group_second_level(&single_fg(&t), &t, 0.2).unwrap();
        let got: Vec<Vec<usize>> = sgs.iter().map(|s| s.members.clone()).collect();

        fn explore(groups: Vec<Vec<usize>>, caps: &[f64], out: &mut Vec<Vec<Vec<usize>>>) {
            let mean = |g: &Vec<usize>| g.iter().map(|&i| caps[i]).sum::<f64>() / g.len() as f64;
            let mut merged_any = false;
            for a in 0..groups.len() {
                for b in a + 1..groups.len() {
                    let (x, y) = (mean(&groups[a]), mean(&groups[b]));
                    if (x - y).abs() / x.max(y) < 0.2 {
                        merged_any = true;
                        let mut next = groups.clone();
                        let mut m = next[a].clone();
                        m.extend(next[b].clone());
                        m.sort();
                        next.remove(b);
                        next[a] = m;
                        explore(next, caps, out);
                    }
                }
            }
            if !merged_any {
                let mut g = groups;
                g.sort();
                out.push(g);
            }
        }
        let mut finals = Vec::new();
        explore((0..5).map(|i| vec![i]).collect(), &caps, &mut finals);
        finals.dedup();
        assert!(finals.iter().all(|f| f == &finals[0]));
        assert_eq!(got, finals[0]);
        assert_eq!(got, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn spread_out_compute_stays_standalone() {
        let t = topo_from(&[16.0, 8.0, 4.0, 2.0], |_, _| 0.1);
        let sgs = group_second_level(&single_fg(&t), &t, 0.3).unwrap();
        assert_eq!(sgs.len(), 4);
    }

    #[test]
    fn pair_metric_examples() {
        let t = topo_from(&[1.0; 4], |i, j| match (i, j) {
            (0, 1) => 1.0,
            (0, 2) => 3.0,
            (0, 3) => 2.0,
            (1, 2) => 3.0,
            (1, 3) => 4.0,
            _ => 9.0,
        });
        assert_eq!(group_pair_metric(&[0], &[1], &t).unwrap(), 1.0);
        assert_eq!(group_pair_metric(&[0], &[1, 2], &t).unwrap(), 2.0);
        // cross pairs 3, 2, 3, 4
        assert_eq!(group_pair_metric(&[0, 1], &[2, 3], &t).unwrap(), 3.0);
        assert!(matches!(group_pair_metric(&[0, 1], &[1, 2], &t), Err(Error::InvalidPair(_))));
    }

    #[test]
    fn pair_metric_two_by_two() {
        let t = topo_from(&[1.0; 4], |i, j| match (i, j) {
            (0, 2) => 1.0,
            (0, 3) => 2.0,
            (1, 2) => 3.0,
            (1, 3) => 4.0,
            _ => 0.5,
        });
        assert_eq!(group_pair_metric(&[0, 1], &[2, 3], &t).unwrap(), 2.5);
    }

    fn random_topology(seed: u64, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let regions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let caps: Vec<f64> = (0..n).map(|_| [1.0, 2.0, 4.0, 8.0][rng.random_range(0..4)] * rng.random_range(0.9..1.1)).collect();
        let mut pt = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i + 1..n {
                let base = if regions[i] == regions[j] { 0.01 } else { 0.5 + regions[i].max(regions[j]) as f64 };
                let v = base * rng.random_range(0.8..1.25);
                pt[i][j] = v;
                pt[j][i] = v;
            }
        }
        (caps, pt)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn groups_partition_devices(seed in any::<u64>(), n in 1usize..14) {
            let (caps, pt) = random_topology(seed, n);
            let t = topo_from(&caps, |i, j| pt[i][j]);
            let h = Hierarchy::build(&t, 0.3, 0.3).unwrap();
            let mut seen: Vec<usize> = h.first_level.iter().flat_map(|g| g.members.clone()).collect();
            seen.sort();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for fg in &h.first_level {
                let mut inner: Vec<usize> = h.sgs(fg.id).iter().flat_map(|s| s.members.clone()).collect();
                inner.sort();
                prop_assert_eq!(&inner, &fg.members);
                prop_assert!(fg.aggregate_capacity > 0.0);
            }
            for rec in &h.audit {
                prop_assert!(rec.spread < rec.threshold);
            }
        }

        #[test]
        fn grouping_is_order_independent(seed in any::<u64>(), n in 2usize..10) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (caps, pt) = random_topology(seed, n);
            let t = topo_from(&caps, |i, j| pt[i][j]);
            let reference = Hierarchy::build(&t, 0.3, 0.3).unwrap();

            let ids: Vec<String> = (0..n).map(|i| format!("d{i:02}")).collect();
            let mut devices: Vec<_> = ids.iter().zip(&caps).map(|(id, &c)| DeviceSpec::with_capacity(id.clone(), 1 << 34, c)).collect();
            let mut ms = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    ms.push(LinkMeasurement::new(ids[j].clone(), ids[i].clone(), pt[i][j], 1e-30, 1e6).with_raw(1e-3, 1e9 / pt[i][j]));
                }
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            devices.shuffle(&mut rng);
            ms.shuffle(&mut rng);
            let t2 = build_topology(&devices, &ms).unwrap();
            prop_assert_eq!(Hierarchy::build(&t2, 0.3, 0.3).unwrap(), reference);
        }

        #[test]
        fn higher_threshold_never_adds_groups(seed in any::<u64>(), n in 2usize..12) {
            let (caps, pt) = random_topology(seed, n);
            let t = topo_from(&caps, |i, j| pt[i][j]);
            let mut last = usize::MAX;
            for th in [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
                let count = group_first_level(&t, th).unwrap().len();
                prop_assert!(count <= last, "threshold {} gave {} groups after {}", th, count, last);
                last = count;
            }
        }
    }
}
