//! Analytical communication cost over a two-level device mesh.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::TensorSpec;
use crate::patterns::CollectiveKind;
use crate::rewrite::fusion::{pack_gradients, DEFAULT_CHUNK_SIZE, DEFAULT_FUSION_THRESHOLD};
use crate::search::RoutedPlan;

/// Slowdown of each collective relative to a ring all-reduce moving the same bytes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Efficiency {
    pub allreduce: f64,
    pub allgather: f64,
    pub reducescatter: f64,
    pub alltoall: f64,
}

impl Default for Efficiency {
    fn default() -> Self {
        Efficiency {
            allreduce: 1.0,
            allgather: 1.2,
            reducescatter: 1.2,
            alltoall: 1.5,
        }
    }
}

impl Efficiency {
    pub fn of(&self, kind: CollectiveKind) -> f64 {
        match kind {
            CollectiveKind::Identity => 0.0,
            CollectiveKind::AllReduceSum => self.allreduce,
            CollectiveKind::AllGather(_) => self.allgather,
            CollectiveKind::ReduceScatter(_) => self.reducescatter,
            CollectiveKind::AllToAll { .. } => self.alltoall,
        }
    }
}

/// `m` worker nodes with `n` accelerators each, plus link and collective
/// parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub m: usize,
    pub n: usize,
    /// Bytes per second within a node.
    #[serde(default = "defaults::intra_bw")]
    pub intra_bw: f64,
    /// Bytes per second across nodes.
    #[serde(default = "defaults::inter_bw")]
    pub inter_bw: f64,
    #[serde(default)]
    pub efficiency: Efficiency,
    /// Share of backward gradient communication hidden behind computation.
    #[serde(default = "defaults::overlap")]
    pub overlap_fraction: f64,
    /// Fixed cost of every backward collective call, in seconds.
    #[serde(default = "defaults::latency")]
    pub setup_latency_s: f64,
    #[serde(default = "defaults::threshold")]
    pub fusion_threshold_bytes: u64,
    #[serde(default = "defaults::chunk")]
    pub chunk_size_bytes: u64,
}

mod defaults {
    pub fn intra_bw() -> f64 {
        128e9
    }
    pub fn inter_bw() -> f64 {
        4e9
    }
    pub fn overlap() -> f64 {
        0.5
    }
    pub fn latency() -> f64 {
        30e-6
    }
    pub fn threshold() -> u64 {
        super::DEFAULT_FUSION_THRESHOLD
    }
    pub fn chunk() -> u64 {
        super::DEFAULT_CHUNK_SIZE
    }
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec::new(1, 1)
    }
}

impl ClusterSpec {
    pub fn new(m: usize, n: usize) -> Self {
        ClusterSpec {
            m,
            n,
            intra_bw: defaults::intra_bw(),
            inter_bw: defaults::inter_bw(),
            efficiency: Efficiency::default(),
            overlap_fraction: defaults::overlap(),
            setup_latency_s: defaults::latency(),
            fusion_threshold_bytes: defaults::threshold(),
            chunk_size_bytes: defaults::chunk(),
        }
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: ClusterSpec =
            serde_json::from_slice(bytes).map_err(|e| Error::BadConfig(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_mesh(mut self, m: usize, n: usize) -> Self {
        self.m = m;
        self.n = n;
        self
    }

    pub fn with_bandwidth(mut self, intra_bw: f64, inter_bw: f64) -> Self {
        self.intra_bw = intra_bw;
        self.inter_bw = inter_bw;
        self
    }

    pub fn devices(&self) -> usize {
        self.m * self.n
    }

    /// Bandwidth collectives run at: the slower inter-node links once the
    /// mesh spans several nodes.
    pub fn bandwidth(&self) -> f64 {
        if self.m > 1 {
            self.inter_bw
        } else {
            self.intra_bw
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.m == 0 || self.n == 0 {
            return bad(format!("mesh {}x{} must have m, n >= 1", self.m, self.n));
        }
        for (what, bw) in [("intra_bw", self.intra_bw), ("inter_bw", self.inter_bw)] {
            if !(bw.is_finite() && bw > 0.0) {
                return bad(format!("{what} must be positive, got {bw}"));
            }
        }
        let e = &self.efficiency;
        if e.allreduce != 1.0 {
            return bad(format!(
                "allreduce efficiency is the reference and must be 1, got {}",
                e.allreduce
            ));
        }
        for (what, f) in [
            ("allgather", e.allgather),
            ("reducescatter", e.reducescatter),
            ("alltoall", e.alltoall),
        ] {
            if !(f.is_finite() && f >= 1.0) {
                return bad(format!("{what} efficiency must be >= 1, got {f}"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return bad(format!(
                "overlap_fraction {} outside [0, 1]",
                self.overlap_fraction
            ));
        }
        if !(self.setup_latency_s.is_finite() && self.setup_latency_s >= 0.0) {
            return bad(format!(
                "setup_latency_s {} must be >= 0",
                self.setup_latency_s
            ));
        }
        if self.fusion_threshold_bytes > self.chunk_size_bytes {
            return bad(format!(
                "fusion threshold {} exceeds chunk size {}",
                self.fusion_threshold_bytes, self.chunk_size_bytes
            ));
        }
        Ok(())
    }
}

/// Parses a mesh string such as `2x8` into `(m, n)`.
pub fn parse_mesh(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::BadConfig(format!("invalid mesh `{s}`, expected MxN with M, N >= 1"));
    let (m, n) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    Ok((m, n))
}

fn volume_time(kind: CollectiveKind, bytes: u64, mesh: &ClusterSpec) -> f64 {
    let d = mesh.devices() as f64;
    let ring = (d - 1.0) / d;
    let factor = match kind {
        CollectiveKind::Identity => return 0.0,
        CollectiveKind::AllReduceSum => 2.0 * ring,
        _ => ring,
    };
    factor * bytes as f64 / mesh.bandwidth() * mesh.efficiency.of(kind)
}

/// Seconds one collective on `tensor` (its full, unsharded size) takes.
pub fn collective_cost(kind: CollectiveKind, tensor: &TensorSpec, mesh: &ClusterSpec) -> f64 {
    volume_time(kind, tensor.byte_size(), mesh)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub forward_comm: f64,
    pub backward_comm: f64,
    pub effective_backward: f64,
    pub total: f64,
    /// Bytes handed to collectives, by collective family.
    pub bytes_by_collective: BTreeMap<String, u64>,
    pub gradient_calls: usize,
    /// Unsharded forward floating-point operations; not part of `total`.
    pub flops: u64,
}

impl CostReport {
    fn record(&mut self, kind: CollectiveKind, bytes: u64) {
        if !kind.is_identity() {
            *self
                .bytes_by_collective
                .entry(kind.family().into())
                .or_default() += bytes;
        }
    }

    /// Report for `times` identical copies.
    pub fn scaled(&self, times: usize) -> CostReport {
        let k = times as f64;
        CostReport {
            forward_comm: self.forward_comm * k,
            backward_comm: self.backward_comm * k,
            effective_backward: self.effective_backward * k,
            total: self.total * k,
            bytes_by_collective: self
                .bytes_by_collective
                .iter()
                .map(|(c, b)| (c.clone(), b * times as u64))
                .collect(),
            gradient_calls: self.gradient_calls * times,
            flops: self.flops * times as u64,
        }
    }

    pub fn add(&mut self, other: &CostReport) {
        self.forward_comm += other.forward_comm;
        self.backward_comm += other.backward_comm;
        self.effective_backward += other.effective_backward;
        self.total += other.total;
        for (c, b) in &other.bytes_by_collective {
            *self.bytes_by_collective.entry(c.clone()).or_default() += b;
        }
        self.gradient_calls += other.gradient_calls;
        self.flops += other.flops;
    }
}

/// Forward cost is the longest chain of activation collectives through the
/// routed region; backward cost is the fused all-reduce of replicated
/// trainable gradients, partly hidden by `overlap_fraction`.
pub fn plan_cost(plan: &RoutedPlan, mesh: &ClusterSpec) -> CostReport {
    let mut report = CostReport {
        flops: plan.flops,
        ..CostReport::default()
    };
    let mut dist = vec![0.0f64; plan.nodes.len()];
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); plan.nodes.len()];
    let mut exits = vec![0.0f64; plan.nodes.len()];
    for e in &plan.edges {
        let c = collective_cost(e.kind, &e.tensor, mesh);
        report.record(e.kind, e.tensor.byte_size());
        match (e.producer, e.consumer) {
            (Some(p), Some(q)) => incoming[q].push((p, c)),
            (Some(p), None) => exits[p] = exits[p].max(c),
            _ => {}
        }
    }
    let mut forward = 0.0f64;
    for (i, node) in plan.nodes.iter().enumerate() {
        report.record(node.collective, node.tensor.byte_size());
        let before = incoming[i]
            .iter()
            .map(|&(p, c)| dist[p] + c)
            .fold(0.0, f64::max);
        dist[i] = before + collective_cost(node.collective, &node.tensor, mesh);
        forward = forward.max(dist[i] + exits[i]);
    }
    report.forward_comm = forward;

    if mesh.devices() > 1 && !plan.gradients.is_empty() {
        let packing = pack_gradients(
            &plan.gradients,
            mesh.fusion_threshold_bytes,
            mesh.chunk_size_bytes,
        )
        .expect("cluster spec validated");
        let sizes = packing
            .buckets
            .iter()
            .map(|b| b.total_bytes)
            .chain(packing.unfused.iter().map(|g| g.bytes));
        for bytes in sizes {
            report.backward_comm +=
                volume_time(CollectiveKind::AllReduceSum, bytes, mesh) + mesh.setup_latency_s;
            report.record(CollectiveKind::AllReduceSum, bytes);
        }
        report.gradient_calls = packing.calls();
    }
    report.effective_backward = report.backward_comm * (1.0 - mesh.overlap_fraction);
    report.total = report.forward_comm + report.effective_backward;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allreduce_closed_form() {
        let mesh = ClusterSpec::new(2, 8).with_bandwidth(100e9, 4e9);
        let t = TensorSpec::weight(vec![1024, 1024]);
        let got = collective_cost(CollectiveKind::AllReduceSum, &t, &mesh);
        let want = 2.0 * 15.0 / 16.0 * 4_194_304.0 / 4e9;
        assert!((got - want).abs() <= 1e-15 * want);
    }

    #[test]
    fn single_device_and_identity_are_free() {
        let t = TensorSpec::weight(vec![64, 64]);
        let one = ClusterSpec::new(1, 1);
        for k in [
            CollectiveKind::AllReduceSum,
            CollectiveKind::AllGather(0),
            CollectiveKind::ReduceScatter(1),
            CollectiveKind::AllToAll { from: 0, to: 1 },
        ] {
            assert_eq!(collective_cost(k, &t, &one), 0.0);
        }
        assert_eq!(
            collective_cost(CollectiveKind::Identity, &t, &ClusterSpec::new(2, 8)),
            0.0
        );
    }

    #[test]
    fn intra_node_mesh_uses_intra_bandwidth() {
        let t = TensorSpec::weight(vec![8, 8]);
        let mesh = ClusterSpec::new(1, 4).with_bandwidth(10.0, 1.0);
        let got = collective_cost(CollectiveKind::AllGather(0), &t, &mesh);
        assert!((got - 0.75 * 256.0 / 10.0 * 1.2).abs() < 1e-12);
    }

    #[test]
    fn mesh_strings() {
        assert_eq!(parse_mesh("2x8").unwrap(), (2, 8));
        assert!(matches!(parse_mesh("0x4"), Err(Error::BadConfig(_))));
        assert!(parse_mesh("4").is_err());
        assert!(parse_mesh("ax2").is_err());
    }

    #[test]
    fn cluster_json_defaults_and_validation() {
        let c = ClusterSpec::from_json(br#"{"m":2,"n":8,"efficiency":{"allgather":1.3}}"#).unwrap();
        assert_eq!(c.efficiency.allgather, 1.3);
        assert_eq!(c.efficiency.alltoall, 1.5);
        assert_eq!(c.overlap_fraction, 0.5);
        assert!(ClusterSpec::from_json(br#"{"m":0,"n":8}"#).is_err());
        assert!(ClusterSpec::from_json(br#"{"m":1,"n":8,"overlap_fraction":2}"#).is_err());
        assert!(
            ClusterSpec::from_json(br#"{"m":1,"n":8,"efficiency":{"allgather":0.5}}"#).is_err()
        );
        assert!(ClusterSpec::from_json(br#"{"m":1,"n":8,"bogus":1}"#).is_err());
    }
}
