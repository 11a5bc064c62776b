//! Device and link capability metrics, and the cluster topology built from them.
//!
//! Nothing here touches real hardware: measurements come from input files or
//! test fixtures. Two metrics are derived:
//!
//! * `p_t = alpha + beta / m` per device pair, from the mean transfer time of a
//!   large payload (`alpha`), the mean transfer time of a tiny payload (`beta`)
//!   and the large payload's size `m`. Lower is better.
//! * `p_c = sum_i w_i / t_i` per device, from weighted benchmark times. Higher
//!   is better.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub task: String,
    pub seconds: f64,
    /// Task weight; `1/n` when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub memory_bytes: u64,
    #[serde(default)]
    pub region: String,
    pub benchmarks: Vec<Benchmark>,
}

impl DeviceSpec {
    pub fn new(id: impl Into<String>, memory_bytes: u64, benchmarks: Vec<Benchmark>) -> Self {
        Self {
            id: id.into(),
            memory_bytes,
            region: String::new(),
            benchmarks,
        }
    }

    /// A device with a single unit-weight benchmark, so that `p_c` equals
    /// `capacity` exactly.
    pub fn with_capacity(id: impl Into<String>, memory_bytes: u64, capacity: f64) -> Self {
        Self::new(
            id,
            memory_bytes,
            vec![Benchmark {
                task: "unit".into(),
                seconds: 1.0 / capacity,
                weight: Some(1.0),
            }],
        )
    }

    /// Resolved `(weight, seconds)` pairs with the uniform default applied.
    pub fn weighted_times(&self) -> Vec<(f64, f64)> {
        let n = self.benchmarks.len() as f64;
        self.benchmarks
            .iter()
            .map(|b| (b.weight.unwrap_or(1.0 / n), b.seconds))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkMeasurement {
    pub a: String,
    pub b: String,
    /// Mean transfer time of the large payload.
    pub alpha_s: f64,
    /// Mean transfer time of the small payload.
    pub beta_s: f64,
    /// Size of the large payload.
    pub payload_bytes: f64,
    /// Raw one-way latency; defaults to `beta_s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
    /// Raw bandwidth; defaults to `payload_bytes / alpha_s`.
    #[serde(default, rename = "bandwidth_Bps", skip_serializing_if = "Option::is_none")]
    pub bandwidth_bps: Option<f64>,
}

impl LinkMeasurement {
    pub fn new(a: impl Into<String>, b: impl Into<String>, alpha_s: f64, beta_s: f64, payload_bytes: f64) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            alpha_s,
            beta_s,
            payload_bytes,
            latency_s: None,
            bandwidth_bps: None,
        }
    }

    pub fn with_raw(mut self, latency_s: f64, bandwidth_bps: f64) -> Self {
        self.latency_s = Some(latency_s);
        self.bandwidth_bps = Some(bandwidth_bps);
        self
    }

    fn label(&self) -> String {
        format!("{}-{}", self.a, self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CommMetric {
    pub p_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ComputeMetric {
    pub p_c: f64,
}

pub fn comm_capability(m: &LinkMeasurement) -> Result<CommMetric> {
    let bad = |reason: &str| Error::InvalidMeasurement {
        pair: m.label(),
        reason: reason.to_string(),
    };
    if m.a == m.b {
        return Err(bad("endpoints must be distinct"));
    }
    for (name, v) in [("alpha_s", m.alpha_s), ("beta_s", m.beta_s), ("payload_bytes", m.payload_bytes)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(bad(&format!("{name} must be positive and finite, got {v}")));
        }
    }
    Ok(CommMetric {
        p_t: m.alpha_s + m.beta_s / m.payload_bytes,
    })
}

pub fn compute_capacity(tasks: &[(f64, f64)]) -> Result<ComputeMetric> {
    compute_capacity_for("<anonymous>", tasks)
}

fn compute_capacity_for(device: &str, tasks: &[(f64, f64)]) -> Result<ComputeMetric> {
    let bad = |reason: String| Error::InvalidBenchmark {
        device: device.to_string(),
        reason,
    };
    if tasks.is_empty() {
        return Err(bad("no benchmark samples".into()));
    }
    let mut p_c = 0.0;
    for &(w, t) in tasks {
        if !(t > 0.0) || !t.is_finite() {
            return Err(bad(format!("execution time must be positive, got {t}")));
        }
        if !(w >= 0.0) || !w.is_finite() {
            return Err(bad(format!("weight must be non-negative, got {w}")));
        }
        p_c += w / t;
    }
    if !(p_c > 0.0) {
        return Err(bad("all weights are zero".into()));
    }
    Ok(ComputeMetric { p_c })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub spec: DeviceSpec,
    pub compute: ComputeMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkInfo {
    pub comm: CommMetric,
    pub latency_s: f64,
    pub bandwidth_bps: f64,
}

/// Devices sorted by id plus the full pairwise link matrix (upper triangle
/// stored, symmetric access).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTopology {
    devices: Vec<Device>,
    links: Vec<LinkInfo>,
}

fn pair_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < n);
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

pub fn build_topology(devices: &[DeviceSpec], measurements: &[LinkMeasurement]) -> Result<ClusterTopology> {
    let mut specs: Vec<DeviceSpec> = devices.to_vec();
    specs.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in specs.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::InvalidDevice {
                device: pair[0].id.clone(),
                reason: "duplicate device id".into(),
            });
        }
    }
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        if spec.memory_bytes == 0 {
            return Err(Error::InvalidDevice {
                device: spec.id.clone(),
                reason: "memory_bytes must be positive".into(),
            });
        }
        let compute = compute_capacity_for(&spec.id, &spec.weighted_times())?;
        out.push(Device { spec, compute });
    }

    let index: BTreeMap<&str, usize> = out.iter().enumerate().map(|(i, d)| (d.spec.id.as_str(), i)).collect();
    let n = out.len();
    let mut slots: Vec<Option<LinkInfo>> = vec![None; n * n.saturating_sub(1) / 2];
    let mut duplicates = BTreeSet::new();
    for m in measurements {
        let comm = comm_capability(m)?;
        let (Some(&i), Some(&j)) = (index.get(m.a.as_str()), index.get(m.b.as_str())) else {
            return Err(Error::InvalidMeasurement {
                pair: m.label(),
                reason: "references an unknown device".into(),
            });
        };
        let latency_s = m.latency_s.unwrap_or(m.beta_s);
        let bandwidth_bps = m.bandwidth_bps.unwrap_or(m.payload_bytes / m.alpha_s);
        if !(latency_s >= 0.0) || !(bandwidth_bps > 0.0) || !bandwidth_bps.is_finite() {
            return Err(Error::InvalidMeasurement {
                pair: m.label(),
                reason: "latency must be >= 0 and bandwidth > 0".into(),
            });
        }
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let slot = &mut slots[tri_index(n, lo, hi)];
        if slot.is_some() {
            let (x, y) = pair_key(&m.a, &m.b);
            duplicates.insert(format!("{x}-{y}"));
        }
        *slot = Some(LinkInfo {
            comm,
            latency_s,
            bandwidth_bps,
        });
    }

    let mut missing = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if slots[tri_index(n, i, j)].is_none() {
                missing.push(format!("{}-{}", out[i].spec.id, out[j].spec.id));
            }
        }
    }
    if !missing.is_empty() || !duplicates.is_empty() {
        return Err(Error::IncompleteTopology {
            missing,
            duplicates: duplicates.into_iter().collect(),
        });
    }
    Ok(ClusterTopology {
        devices: out,
        links: slots.into_iter().map(|s| s.expect("checked above")).collect(),
    })
}

impl ClusterTopology {
    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device(&self, idx: usize) -> &Device {
        &self.devices[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.devices.binary_search_by(|d| d.spec.id.as_str().cmp(id)).ok()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    /// Link between two distinct device indices.
    pub fn link(&self, i: usize, j: usize) -> &LinkInfo {
        assert_ne!(i, j, "self-pairs carry no link");
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        &self.links[tri_index(self.devices.len(), lo, hi)]
    }

    pub fn p_t(&self, i: usize, j: usize) -> f64 {
        self.link(i, j).comm.p_t
    }

    pub fn p_c(&self, i: usize) -> f64 {
        self.devices[i].compute.p_c
    }

    pub fn id(&self, i: usize) -> &str {
        &self.devices[i].spec.id
    }
}
