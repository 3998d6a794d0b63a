//! Machine description: processors grouped into soft-NUMA domains, NUMA
//! domains, and nodes, plus the communication latency between any two
//! processors.
//!
//! A topology is immutable after construction and can be shared freely
//! across concurrent contexts.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a simulated processor.
///
/// Real processors are numbered densely from zero in topology nesting
/// order. Two reserved pseudo-processors exist outside every topology:
/// [`ProcId::INIT`] issues the synthetic initialization events of a trace
/// and [`ProcId::SYS`] issues system-inserted cache evictions.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcId(u32);

impl ProcId {
    /// Reserved processor that writes and flushes initial memory values.
    pub const INIT: ProcId = ProcId(u32::MAX);
    /// Reserved processor that stands for the hardware eviction mechanism.
    pub const SYS: ProcId = ProcId(u32::MAX - 1);

    pub fn new(id: u32) -> ProcId {
        assert!(id < u32::MAX - 1, "processor id collides with a reserved id");
        ProcId(id)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// True for processors that belong to a topology (not INIT/SYS).
    pub fn is_real(self) -> bool {
        self != ProcId::INIT && self != ProcId::SYS
    }
}

impl fmt::Display for ProcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ProcId::INIT => write!(f, "p_init"),
            ProcId::SYS => write!(f, "p_sys"),
            ProcId(n) => write!(f, "p{n}"),
        }
    }
}

impl fmt::Debug for ProcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for ProcId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p_init" => Ok(ProcId::INIT),
            "p_sys" => Ok(ProcId::SYS),
            _ => s
                .strip_prefix('p')
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&n| n < u32::MAX - 1)
                .map(ProcId)
                .ok_or_else(|| format!("invalid processor id {s:?}")),
        }
    }
}

impl Serialize for ProcId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProcId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Identifier of a node: the unit within which hardware coherence holds.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    /// Pseudo-node of [`ProcId::INIT`].
    pub const INIT: NodeId = NodeId(u32::MAX);

    pub fn new(id: u32) -> NodeId {
        assert!(id < u32::MAX, "node id collides with the reserved id");
        NodeId(id)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NodeId::INIT => write!(f, "n_init"),
            NodeId(n) => write!(f, "n{n}"),
        }
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n_init" => Ok(NodeId::INIT),
            _ => s
                .strip_prefix('n')
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&n| n < u32::MAX)
                .map(NodeId)
                .ok_or_else(|| format!("invalid node id {s:?}")),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-level communication latencies in nanoseconds.
///
/// The four levels follow the evaluation platform: within a soft-NUMA
/// domain (a core complex), within a NUMA domain, across NUMA domains of
/// one node, and across nodes through disaggregated memory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latencies {
    /// Same soft-NUMA domain. Draft-derived default; configurable.
    #[serde(default = "default_lat_soft")]
    pub soft: f64,
    /// Same NUMA domain, different soft-NUMA domains.
    #[serde(default = "default_lat_numa")]
    pub numa: f64,
    /// Different NUMA domains of the same node.
    #[serde(default = "default_lat_cross_numa")]
    pub cross_numa: f64,
    /// Different nodes, via disaggregated memory (200, 400, or 800 ns are
    /// the usual estimates).
    #[serde(default = "default_lat_disagg")]
    pub disagg: f64,
}

fn default_lat_soft() -> f64 {
    25.8
}
fn default_lat_numa() -> f64 {
    106.6
}
fn default_lat_cross_numa() -> f64 {
    184.9
}
fn default_lat_disagg() -> f64 {
    200.0
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            soft: default_lat_soft(),
            numa: default_lat_numa(),
            cross_numa: default_lat_cross_numa(),
            disagg: default_lat_disagg(),
        }
    }
}

/// Counts and latencies from which a [`Topology`] is built.
///
/// Deserializes from the JSON document
/// `{"nodes":N,"numa_per_node":..,"soft_per_numa":..,"cores_per_soft":..,
/// "lat_ns":{"soft":..,"numa":..,"cross_numa":..,"disagg":..}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub nodes: u32,
    pub numa_per_node: u32,
    pub soft_per_numa: u32,
    pub cores_per_soft: u32,
    #[serde(default, rename = "lat_ns")]
    pub lat_ns: Latencies,
}

impl TopologySpec {
    pub fn new(nodes: u32, numa_per_node: u32, soft_per_numa: u32, cores_per_soft: u32) -> Self {
        TopologySpec {
            nodes,
            numa_per_node,
            soft_per_numa,
            cores_per_soft,
            lat_ns: Latencies::default(),
        }
    }

    pub fn with_latencies(mut self, lat: Latencies) -> Self {
        self.lat_ns = lat;
        self
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("all counts must be at least 1 (got {0})")]
    ZeroCount(&'static str),
    #[error("latencies must satisfy 0 < soft <= numa <= cross_numa <= disagg")]
    LatencyOrdering,
    #[error("unknown processor {0}")]
    UnknownProc(ProcId),
}

/// Position of a processor in the domain hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Placement {
    node: u32,
    numa: u32,
    soft: u32,
}

/// The machine: a regular hierarchy of nodes, NUMA domains, soft-NUMA
/// domains, and processors, with per-level latencies.
///
/// Processor ids are assigned densely in nesting order, so the placement
/// of a processor is computable from counts alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    spec: TopologySpec,
    placements: Vec<Placement>,
}

impl Topology {
    pub fn build(spec: &TopologySpec) -> Result<Topology, TopologyError> {
        for (name, count) in [
            ("nodes", spec.nodes),
            ("numa_per_node", spec.numa_per_node),
            ("soft_per_numa", spec.soft_per_numa),
            ("cores_per_soft", spec.cores_per_soft),
        ] {
            if count == 0 {
                return Err(TopologyError::ZeroCount(name));
            }
        }
        let l = &spec.lat_ns;
        let ordered =
            0.0 < l.soft && l.soft <= l.numa && l.numa <= l.cross_numa && l.cross_numa <= l.disagg;
        if !ordered {
            return Err(TopologyError::LatencyOrdering);
        }

        let mut placements = Vec::new();
        for node in 0..spec.nodes {
            for numa in 0..spec.numa_per_node {
                for soft in 0..spec.soft_per_numa {
                    for _ in 0..spec.cores_per_soft {
                        placements.push(Placement {
                            node,
                            numa: node * spec.numa_per_node + numa,
                            soft: (node * spec.numa_per_node + numa) * spec.soft_per_numa + soft,
                        });
                    }
                }
            }
        }
        Ok(Topology {
            spec: spec.clone(),
            placements,
        })
    }

    pub fn from_json(json: &str) -> Result<Topology, String> {
        let spec: TopologySpec = serde_json::from_str(json).map_err(|e| e.to_string())?;
        Topology::build(&spec).map_err(|e| e.to_string())
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn latencies(&self) -> &Latencies {
        &self.spec.lat_ns
    }

    pub fn num_procs(&self) -> usize {
        self.placements.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.spec.nodes as usize
    }

    pub fn procs(&self) -> impl Iterator<Item = ProcId> + '_ {
        (0..self.placements.len() as u32).map(ProcId)
    }

    pub fn contains(&self, p: ProcId) -> bool {
        p.is_real() && p.index() < self.placements.len()
    }

    /// The node a processor belongs to. Total over real processors;
    /// the INIT pseudo-processor maps to its own pseudo-node.
    pub fn node_of(&self, p: ProcId) -> Result<NodeId, TopologyError> {
        if p == ProcId::INIT {
            return Ok(NodeId::INIT);
        }
        self.placements
            .get(p.index())
            .map(|pl| NodeId(pl.node))
            .ok_or(TopologyError::UnknownProc(p))
    }

    pub fn procs_of_node(&self, node: NodeId) -> impl Iterator<Item = ProcId> + '_ {
        self.placements
            .iter()
            .enumerate()
            .filter(move |(_, pl)| pl.node == node.0)
            .map(|(i, _)| ProcId(i as u32))
    }

    /// Number of processors in the first NUMA domain and in the first node,
    /// used by the overhead model to classify added cores.
    pub fn procs_per_numa(&self) -> usize {
        (self.spec.soft_per_numa * self.spec.cores_per_soft) as usize
    }

    pub fn procs_per_node(&self) -> usize {
        self.procs_per_numa() * self.spec.numa_per_node as usize
    }

    /// Communication latency between two processors, per the innermost
    /// grouping level they share. Zero when `a == b`.
    pub fn comm_latency(&self, a: ProcId, b: ProcId) -> Result<f64, TopologyError> {
        let pa = self
            .placements
            .get(a.index())
            .filter(|_| a.is_real())
            .ok_or(TopologyError::UnknownProc(a))?;
        let pb = self
            .placements
            .get(b.index())
            .filter(|_| b.is_real())
            .ok_or(TopologyError::UnknownProc(b))?;
        let l = &self.spec.lat_ns;
        Ok(if a == b {
            0.0
        } else if pa.soft == pb.soft {
            l.soft
        } else if pa.numa == pb.numa {
            l.numa
        } else if pa.node == pb.node {
            l.cross_numa
        } else {
            l.disagg
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evaluation_platform_shape() {
        // Two-socket, 16 core complexes of 8 cores each: 256 processors.
        let t = Topology::build(&TopologySpec::new(1, 2, 16, 8)).unwrap();
        assert_eq!(t.num_procs(), 256);
        assert_eq!(t.procs_per_numa(), 128);
        assert_eq!(t.procs_per_node(), 256);
    }

    #[test]
    fn degenerate_single_processor() {
        let t = Topology::build(&TopologySpec::new(1, 1, 1, 1)).unwrap();
        assert_eq!(t.num_procs(), 1);
        assert_eq!(t.node_of(ProcId::new(0)).unwrap(), NodeId::new(0));
    }

    #[test]
    fn nesting_order_numbering() {
        let t = Topology::build(&TopologySpec::new(3, 1, 1, 2)).unwrap();
        assert_eq!(t.num_procs(), 6);
        assert_eq!(t.node_of(ProcId::new(0)).unwrap(), NodeId::new(0));
        assert_eq!(t.node_of(ProcId::new(1)).unwrap(), NodeId::new(0));
        assert_eq!(t.node_of(ProcId::new(4)).unwrap(), NodeId::new(2));
        assert_eq!(t.node_of(ProcId::new(5)).unwrap(), NodeId::new(2));
    }

    #[test]
    fn zero_counts_rejected() {
        assert_eq!(
            Topology::build(&TopologySpec::new(0, 1, 1, 1)),
            Err(TopologyError::ZeroCount("nodes"))
        );
        assert_eq!(
            Topology::build(&TopologySpec::new(1, 1, 0, 1)),
            Err(TopologyError::ZeroCount("soft_per_numa"))
        );
    }

    #[test]
    fn latency_ordering_enforced() {
        let mut spec = TopologySpec::new(1, 1, 1, 1);
        spec.lat_ns.numa = spec.lat_ns.soft / 2.0;
        assert_eq!(
            Topology::build(&spec),
            Err(TopologyError::LatencyOrdering)
        );
        spec.lat_ns = Latencies {
            soft: 0.0,
            numa: 1.0,
            cross_numa: 2.0,
            disagg: 3.0,
        };
        assert_eq!(
            Topology::build(&spec),
            Err(TopologyError::LatencyOrdering)
        );
    }

    #[test]
    fn latency_levels() {
        // 2 nodes x 2 NUMA x 2 soft x 2 cores.
        let t = Topology::build(&TopologySpec::new(2, 2, 2, 2)).unwrap();
        let p = ProcId::new;
        // Same processor.
        assert_eq!(t.comm_latency(p(0), p(0)).unwrap(), 0.0);
        // Same soft-NUMA pair.
        assert_eq!(t.comm_latency(p(0), p(1)).unwrap(), 25.8);
        // Same NUMA, different soft-NUMA.
        assert_eq!(t.comm_latency(p(0), p(2)).unwrap(), 106.6);
        // Same node, different NUMA.
        assert_eq!(t.comm_latency(p(0), p(4)).unwrap(), 184.9);
        // Different nodes.
        assert_eq!(t.comm_latency(p(0), p(8)).unwrap(), 200.0);
    }

    #[test]
    fn latency_symmetric_and_level_based() {
        let t = Topology::build(&TopologySpec::new(2, 2, 2, 2)).unwrap();
        let lats = [25.8, 106.6, 184.9, 200.0];
        for a in t.procs() {
            for b in t.procs() {
                let ab = t.comm_latency(a, b).unwrap();
                let ba = t.comm_latency(b, a).unwrap();
                assert_eq!(ab, ba, "asymmetric latency for {a}/{b}");
                if a == b {
                    assert_eq!(ab, 0.0);
                } else {
                    assert!(lats.contains(&ab), "unexpected level value {ab}");
                }
            }
        }
    }

    #[test]
    fn unknown_proc_rejected() {
        let t = Topology::build(&TopologySpec::new(1, 1, 1, 2)).unwrap();
        assert!(t.comm_latency(ProcId::new(0), ProcId::new(7)).is_err());
        assert!(t.comm_latency(ProcId::SYS, ProcId::new(0)).is_err());
    }

    #[test]
    fn spec_from_json_with_defaults() {
        let t = Topology::from_json(
            r#"{"nodes":2,"numa_per_node":1,"soft_per_numa":1,"cores_per_soft":2,
                "lat_ns":{"disagg":800.0}}"#,
        )
        .unwrap();
        assert_eq!(t.latencies().disagg, 800.0);
        assert_eq!(t.latencies().soft, 25.8);
        assert_eq!(t.num_procs(), 4);
    }

    #[test]
    fn proc_and_node_id_round_trip() {
        for p in [ProcId::new(0), ProcId::new(17), ProcId::INIT, ProcId::SYS] {
            assert_eq!(p.to_string().parse::<ProcId>().unwrap(), p);
        }
        for n in [NodeId::new(0), NodeId::new(3), NodeId::INIT] {
            assert_eq!(n.to_string().parse::<NodeId>().unwrap(), n);
        }
        assert!("q3".parse::<ProcId>().is_err());
        assert!("p".parse::<ProcId>().is_err());
    }
}
