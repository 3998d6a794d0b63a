//! Decision procedures for per-location coherence conditions.
//!
//! Three models are checked over a [`History`] (one location's events
//! projected from a trace):
//!
//! - [`check_full`]: classic cache coherence. Some total order of the
//!   events, consistent with per-processor order and cross-processor
//!   edges, makes every read return the immediately preceding write.
//! - [`check_weak`]: the flush-based weakening where every processor is
//!   its own coherence domain. Reads return the domain's cached value, or
//!   the memory value established by the last effective write-back.
//! - [`check_federated`]: the per-node variant. The shared cache belongs
//!   to the node, and the order may additionally contain system-inserted
//!   flushes standing for hardware evictions.
//!
//! [`check_federated`] is an operational, memoized state search;
//! [`check_federated_axiomatic`] is a brute-force enumeration over total
//! orders with explicit flush insertions, kept implementation-independent
//! so the two can cross-validate each other. Accepting verdicts carry a
//! witness order that replays through a separate single-pass rule
//! evaluator ([`validate_witness`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memcore::{Event, EventKind, Location, Value};
use crate::topology::{NodeId, ProcId};

mod axiomatic;
pub mod enumeration;
mod operational;
mod project;
mod replay;

pub use axiomatic::{check_federated_axiomatic, AxiomaticOptions};
pub use operational::{
    check_federated, check_federated_with, check_full, check_full_with, check_weak,
    check_weak_with,
};
pub use project::project_histories;
pub use replay::validate_witness;

/// Coherence model a verdict refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Full,
    Weak,
    Federated,
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Full => "full",
            Model::Weak => "weak",
            Model::Federated => "federated",
        })
    }
}

/// A coherence domain: a node's shared cache, or a single processor's
/// cache in the weak model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Domain {
    Node(NodeId),
    Proc(ProcId),
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Node(n) => write!(f, "{n}"),
            Domain::Proc(p) => write!(f, "{p}"),
        }
    }
}

/// How processors map onto coherence domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeMap {
    /// Use the node recorded on each event.
    Recorded,
    /// Every processor is its own domain (degeneration to the weak model).
    Singleton,
}

/// One location's events projected from a trace, preserving per-processor
/// order and cross-processor edges. Atomic operations are single
/// indivisible events.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    location: Location,
    events: Vec<Event>,
}

impl History {
    /// Validates and wraps a per-location event list. Requirements:
    /// strictly increasing seq numbers, all events on one location, edges
    /// referencing earlier events of the history, and (unless empty) an
    /// init write+flush prefix by the reserved init processor.
    pub fn new(location: Location, events: Vec<Event>) -> Result<History, CheckError> {
        let malformed = |reason: String| CheckError::MalformedHistory { reason };
        let mut seen = Vec::with_capacity(events.len());
        for ev in &events {
            if ev.loc != location {
                return Err(malformed(format!(
                    "event {} is on {:?}, not {:?}",
                    ev.seq, ev.loc, location
                )));
            }
            if seen.last().is_some_and(|&s| s >= ev.seq) {
                return Err(malformed(format!("seq {} not increasing", ev.seq)));
            }
            for &t in &ev.after {
                if !seen.contains(&t) {
                    return Err(malformed(format!(
                        "event {} ordered after {} which is not an earlier event of this history",
                        ev.seq, t
                    )));
                }
            }
            seen.push(ev.seq);
        }
        if !events.is_empty() {
            let init_count = events.iter().filter(|e| e.proc == ProcId::INIT).count();
            let ok = init_count == 2
                && events.len() >= 2
                && events[0].proc == ProcId::INIT
                && matches!(events[0].kind, EventKind::Write { .. })
                && events[1].proc == ProcId::INIT
                && events[1].kind == EventKind::Flush;
            if !ok {
                return Err(malformed(
                    "history must start with the init write+flush pair".into(),
                ));
            }
        }
        Ok(History { location, events })
    }

    pub fn location(&self) -> &Location {
        &self.location
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The initial memory value, from the init write.
    pub fn init_value(&self) -> Option<Value> {
        self.events.first().and_then(|e| match e.kind {
            EventKind::Write { value } => Some(value),
            _ => None,
        })
    }

    /// Distinct processors, in order of first appearance.
    pub fn procs(&self) -> Vec<ProcId> {
        let mut out: Vec<ProcId> = Vec::new();
        for ev in &self.events {
            if !out.contains(&ev.proc) {
                out.push(ev.proc);
            }
        }
        out
    }

    /// Domain an event acts on under a node map. Evictions flush node
    /// caches; under [`NodeMap::Singleton`] an eviction stands for a
    /// flush of every processor domain of its node, which the engines
    /// special-case.
    pub(crate) fn domain_of(ev: &Event, map: NodeMap) -> Domain {
        match map {
            NodeMap::Recorded => Domain::Node(ev.node),
            NodeMap::Singleton => Domain::Proc(ev.proc),
        }
    }
}

/// A step of a witness order: one of the history's events, or a flush
/// inserted by the checker (a hypothetical cache eviction).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WitnessStep {
    Event(u64),
    InsertedFlush { domain: Domain },
}

impl Serialize for WitnessStep {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        match self {
            WitnessStep::Event(seq) => ser.serialize_u64(*seq),
            WitnessStep::InsertedFlush { domain } => {
                let mut st = ser.serialize_struct("InsertedFlush", 1)?;
                st.serialize_field("flush", &domain.to_string())?;
                st.end()
            }
        }
    }
}

/// The read (or atomic) that could not be satisfied, with the rule that
/// failed on the deepest search frontier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Culprit {
    pub seq: u64,
    pub rule: String,
    pub detail: String,
}

/// Outcome of a check: accepted with a witness order, or rejected with a
/// culprit read.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub location: Location,
    pub model: Model,
    pub accepted: bool,
    pub witness: Option<Vec<WitnessStep>>,
    pub culprit: Option<Culprit>,
}

impl Serialize for Verdict {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let extra = usize::from(self.witness.is_some()) + usize::from(self.culprit.is_some());
        let mut st = ser.serialize_struct("Verdict", 3 + extra)?;
        st.serialize_field("location", &self.location)?;
        st.serialize_field("model", &self.model)?;
        st.serialize_field("accepted", &self.accepted)?;
        if let Some(w) = &self.witness {
            st.serialize_field("witness", w)?;
        }
        if let Some(c) = &self.culprit {
            st.serialize_field("culprit", c)?;
        }
        st.end()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CheckError {
    #[error("history has {events} events, exceeding the bound of {max}")]
    BoundExceeded { events: usize, max: usize },
    #[error("malformed history: {reason}")]
    MalformedHistory { reason: String },
}

/// Knobs of the operational checkers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckConfig {
    /// Histories longer than this are rejected with a bound error rather
    /// than a verdict.
    pub max_events: usize,
    /// Whether the federated search may insert eviction flushes. On by
    /// default; disabling yields the insertion-free reading used when
    /// comparing against the weak model.
    pub insertions: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            max_events: 20,
            insertions: true,
        }
    }
}

impl CheckConfig {
    pub fn with_max_events(mut self, max: usize) -> Self {
        self.max_events = max;
        self
    }

    pub fn without_insertions(mut self) -> Self {
        self.insertions = false;
        self
    }
}

/// Human-readable rendering of a verdict: the witness order for accepts,
/// the culprit read and failed rule for rejects.
pub fn explain(v: &Verdict) -> String {
    let mut out = String::new();
    if v.accepted {
        match &v.witness {
            Some(w) if w.is_empty() => {
                out.push_str(&format!(
                    "{} under {}: vacuously accepted (empty history)",
                    v.location, v.model
                ));
            }
            Some(w) => {
                out.push_str(&format!(
                    "{} under {}: accepted; witness order:\n",
                    v.location, v.model
                ));
                for step in w {
                    match step {
                        WitnessStep::Event(seq) => out.push_str(&format!("  event {seq}\n")),
                        WitnessStep::InsertedFlush { domain } => {
                            out.push_str(&format!("  inserted flush of {domain}\n"))
                        }
                    }
                }
            }
            None => out.push_str(&format!("{} under {}: accepted", v.location, v.model)),
        }
    } else {
        out.push_str(&format!("{} under {}: rejected", v.location, v.model));
        if let Some(c) = &v.culprit {
            out.push_str(&format!(
                "; event {} cannot be satisfied by rule {} ({})",
                c.seq, c.rule, c.detail
            ));
        }
    }
    out
}

/// Builder for hand-written histories, used by tests and the litmus
/// catalog.
pub struct HistoryBuilder {
    loc: Location,
    events: Vec<Event>,
    node_of: BTreeMap<ProcId, NodeId>,
}

impl HistoryBuilder {
    pub fn new(loc: impl Into<Location>, init_value: Value) -> HistoryBuilder {
        let loc = loc.into();
        let events = vec![
            Event {
                seq: 0,
                proc: ProcId::INIT,
                node: NodeId::INIT,
                kind: EventKind::Write { value: init_value },
                loc: loc.clone(),
                after: vec![],
            },
            Event {
                seq: 1,
                proc: ProcId::INIT,
                node: NodeId::INIT,
                kind: EventKind::Flush,
                loc: loc.clone(),
                after: vec![],
            },
        ];
        HistoryBuilder {
            loc,
            events,
            node_of: BTreeMap::new(),
        }
    }

    /// Declares that processor `p` runs on node `n`.
    pub fn place(mut self, p: ProcId, n: NodeId) -> Self {
        self.node_of.insert(p, n);
        self
    }

    fn push(&mut self, p: ProcId, kind: EventKind, after: Vec<u64>) -> u64 {
        let node = *self
            .node_of
            .get(&p)
            .expect("processor must be placed before use");
        let seq = self.events.len() as u64;
        self.events.push(Event {
            seq,
            proc: p,
            node,
            kind,
            loc: self.loc.clone(),
            after,
        });
        seq
    }

    pub fn write(&mut self, p: ProcId, value: Value) -> u64 {
        self.push(p, EventKind::Write { value }, vec![])
    }

    pub fn read(&mut self, p: ProcId, value: Value) -> u64 {
        self.push(p, EventKind::Read { value }, vec![])
    }

    pub fn read_after(&mut self, p: ProcId, value: Value, after: Vec<u64>) -> u64 {
        self.push(p, EventKind::Read { value }, after)
    }

    pub fn flush(&mut self, p: ProcId) -> u64 {
        self.push(p, EventKind::Flush, vec![])
    }

    pub fn cas(
        &mut self,
        p: ProcId,
        expected: Value,
        new: Value,
        success: bool,
        observed: Value,
    ) -> u64 {
        self.push(
            p,
            EventKind::Rmw(crate::memcore::RmwKind::Cas {
                expected,
                new,
                success,
                observed,
            }),
            vec![],
        )
    }

    pub fn faa(&mut self, p: ProcId, delta: Value, old: Value) -> u64 {
        self.push(
            p,
            EventKind::Rmw(crate::memcore::RmwKind::Faa { delta, old }),
            vec![],
        )
    }

    pub fn finish(self) -> History {
        History::new(self.loc, self.events).expect("builder produces well-formed histories")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::Location;

    fn p(i: u32) -> ProcId {
        ProcId::new(i)
    }
    fn n(i: u32) -> NodeId {
        NodeId::new(i)
    }

    /// Cross-node builder: p0 on n0, p1 on n1, p2 on n0, p3 on n1.
    fn cross(loc: &'static str, init: Value) -> HistoryBuilder {
        HistoryBuilder::new(loc, init)
            .place(p(0), n(0))
            .place(p(1), n(1))
            .place(p(2), n(0))
            .place(p(3), n(1))
    }

    fn assert_witness_ok(h: &History, v: &Verdict, map: NodeMap) {
        if v.accepted {
            let w = v.witness.as_ref().expect("accepts carry a witness");
            validate_witness(h, w, v.model, map).expect("witness must replay");
        } else {
            assert!(v.culprit.is_some(), "rejects carry a culprit");
        }
    }

    #[test]
    fn full_accepts_trivial_read_of_init() {
        let mut b = cross("x", 0);
        b.read(p(0), 0);
        let h = b.finish();
        let v = check_full(&h).unwrap();
        assert!(v.accepted);
        assert_witness_ok(&h, &v, NodeMap::Recorded);
    }

    #[test]
    fn full_rejects_reversed_observation() {
        // p0: w(1), w(2); p1: r(2), r(1) -- no order serializes 1 after 2.
        let mut b = cross("x", 0);
        b.write(p(0), 1);
        b.write(p(0), 2);
        b.read(p(1), 2);
        b.read(p(1), 1);
        let h = b.finish();
        let v = check_full(&h).unwrap();
        assert!(!v.accepted);
        assert!(v.culprit.is_some());
    }

    #[test]
    fn broken_cas_pair_rejected_by_full_accepted_by_federated() {
        // Two cross-node CAS both succeeding from 0: each node caches 0
        // independently.
        let mut b = cross("x", 0);
        b.cas(p(0), 0, 1, true, 0);
        b.cas(p(1), 0, 1, true, 0);
        let h = b.finish();
        let full = check_full(&h).unwrap();
        assert!(!full.accepted);
        let fed = check_federated(&h, NodeMap::Recorded).unwrap();
        assert!(fed.accepted);
        assert_witness_ok(&h, &fed, NodeMap::Recorded);
        let ax = check_federated_axiomatic(&h, NodeMap::Recorded, &AxiomaticOptions::default())
            .unwrap();
        assert!(ax.accepted);
        assert_witness_ok(&h, &ax, NodeMap::Recorded);
    }

    #[test]
    fn weak_accepts_flushed_handoff() {
        // p0: w(1), flush; p1: flush, r(1) -- rule 2(b).
        let mut b = cross("x", 0);
        b.write(p(0), 1);
        b.flush(p(0));
        b.flush(p(1));
        b.read(p(1), 1);
        let h = b.finish();
        let v = check_weak(&h).unwrap();
        assert!(v.accepted);
        assert_witness_ok(&h, &v, NodeMap::Singleton);
    }

    #[test]
    fn weak_rejects_unflushed_write() {
        // p0: w(1) with no flush; p1: flush, r(1). Memory still holds 0.
        let mut b = cross("x", 0);
        b.write(p(0), 1);
        b.flush(p(1));
        b.read(p(1), 1);
        let h = b.finish();
        let v = check_weak(&h).unwrap();
        assert!(!v.accepted);
        assert_eq!(v.culprit.as_ref().unwrap().rule, "2(b)");
    }

    #[test]
    fn stale_read_with_edge_separates_models() {
        // L1: p1 (n1) warms its cache, p0 (n0) writes without flushing,
        // a notification edge forces the second read after the write.
        let mut b = cross("x", 0);
        b.read(p(1), 0);
        let w = b.write(p(0), 2);
        b.read_after(p(1), 0, vec![w]);
        let h = b.finish();

        let full = check_full(&h).unwrap();
        assert!(!full.accepted);
        let fed = check_federated(&h, NodeMap::Recorded).unwrap();
        assert!(fed.accepted, "rule 2(a) serves the cached value");
        assert_witness_ok(&h, &fed, NodeMap::Recorded);
        let ax = check_federated_axiomatic(&h, NodeMap::Recorded, &AxiomaticOptions::default())
            .unwrap();
        assert!(ax.accepted);
        // Without the edge the staleness is serializable away and even the
        // full model accepts.
        let mut b = cross("x", 0);
        b.read(p(1), 0);
        b.write(p(0), 2);
        b.read(p(1), 0);
        let v = check_full(&b.finish()).unwrap();
        assert!(v.accepted);
    }

    #[test]
    fn out_of_thin_air_rejected_everywhere() {
        let mut b = cross("x", 0);
        b.read(p(1), 7);
        let h = b.finish();
        assert!(!check_full(&h).unwrap().accepted);
        assert!(!check_weak(&h).unwrap().accepted);
        assert!(!check_federated(&h, NodeMap::Recorded).unwrap().accepted);
        assert!(
            !check_federated_axiomatic(&h, NodeMap::Recorded, &AxiomaticOptions::default())
                .unwrap()
                .accepted
        );
    }

    #[test]
    fn intra_node_faa_pair_fully_coherent() {
        // Two FAAs on one node followed by a read of 2.
        let mut b = cross("x", 0);
        b.faa(p(0), 1, 0);
        b.faa(p(2), 1, 1);
        b.read(p(0), 2);
        let h = b.finish();
        assert!(check_full(&h).unwrap().accepted);
        assert!(check_federated(&h, NodeMap::Recorded).unwrap().accepted);
    }

    #[test]
    fn cross_node_faa_lost_increment() {
        // Both FAAs observe 0; after both nodes flush, a bypass read sees 1.
        let mut b = cross("x", 0);
        b.faa(p(0), 1, 0);
        b.faa(p(1), 1, 0);
        b.flush(p(0));
        b.flush(p(1));
        b.flush(p(2));
        b.read(p(2), 1);
        let h = b.finish();
        assert!(!check_full(&h).unwrap().accepted);
        let fed = check_federated(&h, NodeMap::Recorded).unwrap();
        assert!(fed.accepted);
        assert_witness_ok(&h, &fed, NodeMap::Recorded);
    }

    #[test]
    fn bound_exceeded_is_an_error_not_a_verdict() {
        let mut b = cross("x", 0);
        for i in 0..30 {
            b.write(p(0), i % 2);
        }
        let h = b.finish();
        assert!(matches!(
            check_full(&h),
            Err(CheckError::BoundExceeded { .. })
        ));
        assert!(matches!(
            check_federated_axiomatic(&h, NodeMap::Recorded, &AxiomaticOptions::default()),
            Err(CheckError::BoundExceeded { .. })
        ));
        // A raised bound yields a verdict.
        let cfg = CheckConfig::default().with_max_events(64);
        assert!(check_full_with(&h, &cfg).unwrap().accepted);
    }

    #[test]
    fn empty_history_vacuously_accepted() {
        let h = History::new(Location::from("x"), vec![]).unwrap();
        let v = check_full(&h).unwrap();
        assert!(v.accepted);
        assert_eq!(v.witness.as_deref(), Some(&[][..]));
        assert!(explain(&v).contains("vacuously"));
    }

    #[test]
    fn explain_mentions_failed_rule() {
        let mut b = cross("x", 0);
        b.write(p(0), 1);
        b.flush(p(1));
        b.read(p(1), 1);
        let v = check_weak(&b.finish()).unwrap();
        assert!(explain(&v).contains("2(b)"));
    }

    #[test]
    fn witness_includes_inserted_flush_markers() {
        // Cross-node handoff without an explicit writer flush needs an
        // inserted eviction of n0.
        let mut b = cross("x", 0);
        b.write(p(0), 1);
        b.flush(p(1));
        b.read(p(1), 1);
        let h = b.finish();
        let v = check_federated(&h, NodeMap::Recorded).unwrap();
        assert!(v.accepted);
        let w = v.witness.as_ref().unwrap();
        assert!(w
            .iter()
            .any(|s| matches!(s, WitnessStep::InsertedFlush { domain: Domain::Node(x) } if *x == n(0))));
        assert_witness_ok(&h, &v, NodeMap::Recorded);
        // With insertions disabled the same history is rejected.
        let cfg = CheckConfig::default().without_insertions();
        assert!(!check_federated_with(&h, NodeMap::Recorded, &cfg)
            .unwrap()
            .accepted);
    }

    #[test]
    fn verdicts_insensitive_to_seq_relabeling() {
        let mut b = cross("x", 0);
        b.read(p(1), 0);
        let w = b.write(p(0), 2);
        b.read_after(p(1), 0, vec![w]);
        let h = b.finish();

        let relabel = |h: &History| {
            let events = h
                .events()
                .iter()
                .map(|e| Event {
                    seq: e.seq * 10 + 3,
                    after: e.after.iter().map(|s| s * 10 + 3).collect(),
                    ..e.clone()
                })
                .collect();
            History::new(h.location().clone(), events).unwrap()
        };
        let h2 = relabel(&h);
        for (a, b) in [
            (check_full(&h).unwrap(), check_full(&h2).unwrap()),
            (check_weak(&h).unwrap(), check_weak(&h2).unwrap()),
            (
                check_federated(&h, NodeMap::Recorded).unwrap(),
                check_federated(&h2, NodeMap::Recorded).unwrap(),
            ),
        ] {
            assert_eq!(a.accepted, b.accepted);
        }
    }

    #[test]
    fn malformed_histories_rejected() {
        // Missing init prefix.
        let ev = Event {
            seq: 0,
            proc: p(0),
            node: n(0),
            kind: EventKind::Read { value: 0 },
            loc: Location::from("x"),
            after: vec![],
        };
        assert!(History::new(Location::from("x"), vec![ev]).is_err());
    }

    #[test]
    fn verdict_json_shape() {
        let mut b = cross("x", 0);
        b.read(p(0), 0);
        let v = check_federated(&b.finish(), NodeMap::Recorded).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.starts_with(r#"{"location":"x","model":"federated","accepted":true,"witness":["#));
    }
}
