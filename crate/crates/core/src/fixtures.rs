//! Ready-made clusters, timings and traces for tests, examples and the CLI.

use crate::profiling::{build_topology, ClusterTopology, DeviceSpec, LinkMeasurement};
use crate::schedule::PipelineTiming;
use crate::simulator::NetworkTrace;

const PROBE_PAYLOAD: f64 = 1e6;
pub const DEFAULT_MEMORY: u64 = 64 << 30;

/// Measurement consistent with a link of the given latency and bandwidth.
pub fn measured_link(a: &str, b: &str, latency: f64, bandwidth: f64) -> LinkMeasurement {
    LinkMeasurement::new(a, b, latency + PROBE_PAYLOAD / bandwidth, latency + 1.0 / bandwidth, PROBE_PAYLOAD)
        .with_raw(latency, bandwidth)
}

/// Devices of one network group and the group's internal link.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub prefix: String,
    pub capacities: Vec<f64>,
    pub latency: f64,
    pub bandwidth: f64,
}

/// Full mesh: each group uses its own link parameters inside, and
/// `cross(g, h)` gives `(latency, bandwidth)` between groups `g < h`.
pub fn grouped_cluster(groups: &[GroupSpec], cross: impl Fn(usize, usize) -> (f64, f64)) -> ClusterTopology {
    let mut devices = Vec::new();
    let mut owner = Vec::new();
    for (g, spec) in groups.iter().enumerate() {
        for (i, &cap) in spec.capacities.iter().enumerate() {
            let mut d = DeviceSpec::with_capacity(format!("{}{i:02}", spec.prefix), DEFAULT_MEMORY, cap);
            d.region = spec.prefix.clone();
            devices.push(d);
            owner.push(g);
        }
    }
    let mut links = Vec::new();
    for i in 0..devices.len() {
        for j in i + 1..devices.len() {
            let (gi, gj) = (owner[i], owner[j]);
            let (lat, bw) = if gi == gj {
                (groups[gi].latency, groups[gi].bandwidth)
            } else {
                cross(gi.min(gj), gi.max(gj))
            };
            links.push(measured_link(&devices[i].id, &devices[j].id, lat, bw));
        }
    }
    build_topology(&devices, &links).expect("fixture topology is complete")
}

/// Groups with identical internal and identical cross-group links.
pub fn uniform_cluster(
    groups: &[Vec<f64>],
    intra_bandwidth: f64,
    intra_latency: f64,
    cross_bandwidth: f64,
    cross_latency: f64,
) -> ClusterTopology {
    let specs: Vec<GroupSpec> = groups
        .iter()
        .enumerate()
        .map(|(g, caps)| GroupSpec {
            prefix: format!("g{g}d"),
            capacities: caps.clone(),
            latency: intra_latency,
            bandwidth: intra_bandwidth,
        })
        .collect();
    grouped_cluster(&specs, |_, _| (cross_latency, cross_bandwidth))
}

/// Twelve devices in three tiers: cloud (fast interconnect), edge, end.
/// Within tiers, capacities (TFLOP/s) are chosen so the compute-level
/// grouping gives 3 groups, 4 singletons, and 1 group plus 2 singletons.
pub fn three_tier_groups() -> Vec<GroupSpec> {
    let t = 1e12;
    vec![
        GroupSpec {
            prefix: "cloud".into(),
            capacities: vec![12.0 * t, 12.0 * t, 6.0 * t, 2.0 * t],
            latency: 50e-6,
            bandwidth: 10e9,
        },
        GroupSpec {
            prefix: "edge".into(),
            capacities: vec![16.0 * t, 8.0 * t, 4.0 * t, 2.0 * t],
            latency: 1e-3,
            bandwidth: 1e9,
        },
        GroupSpec {
            prefix: "end".into(),
            capacities: vec![6.0 * t, 6.0 * t, 3.0 * t, 1.0 * t],
            latency: 5e-3,
            bandwidth: 100e6,
        },
    ]
}

pub fn three_tier_cross(g: usize, h: usize) -> (f64, f64) {
    match (g, h) {
        (0, 1) => (10e-3, 100e6),
        (1, 2) => (20e-3, 50e6),
        _ => (50e-3, 10e6),
    }
}

pub fn three_tier_cluster() -> ClusterTopology {
    grouped_cluster(&three_tier_groups(), three_tier_cross)
}

/// Four stages, six micro-batches, unit F/B/W, and 1.5 s per inter-stage
/// transfer: links are slower than compute.
pub fn slow_link_timing() -> PipelineTiming {
    PipelineTiming::uniform(4, 1.0, 1.0, 1.0, 1.5, 6, 1)
}

/// Four-stage pipeline whose links normally move a 32-sample micro-batch in
/// about 0.6 s, under the compute time of the receiving stage.
pub fn fluctuation_timing() -> PipelineTiming {
    let mut t = PipelineTiming::uniform(4, 0.5, 0.5, 0.5, 0.6, 128, 32);
    for l in &mut t.links {
        l.latency = 0.01;
        l.bytes_per_sample = 0.59 / 32.0;
    }
    t
}

/// Links 0, 1 and 2 drop to 60%, 50% and 40% of their bandwidth at `at`.
pub fn fluctuation_trace(at: f64) -> NetworkTrace {
    NetworkTrace::new(&[
        crate::simulator::TraceRecord { link: 0, t: at, multiplier: 0.6 },
        crate::simulator::TraceRecord { link: 1, t: at, multiplier: 0.5 },
        crate::simulator::TraceRecord { link: 2, t: at, multiplier: 0.4 },
    ])
    .expect("fixture trace is valid")
}
