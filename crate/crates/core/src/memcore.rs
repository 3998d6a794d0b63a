//! Operational simulator of shared disaggregated memory under federated
//! coherence: one global memory plus one shared cache per node.
//!
//! Every operation is appended to a trace. Writes are write-back and
//! write-allocate without a memory load (a write overwrites the full
//! line); a flush writes back a dirty line and invalidates the line in
//! all cases; atomics operate on the issuing node's line only, which is
//! exactly what produces the cross-node atomicity anomalies.
//!
//! Two driving modes share one contract: a deterministic driver may issue
//! operations for simulated processors in an explicit schedule, or real
//! concurrent executors may own disjoint processor sets and issue
//! operations simultaneously. Conflicting transitions are serialized
//! internally, and any such serialization is a valid execution.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::topology::{NodeId, ProcId, Topology, TopologyError};

pub mod trace_io;

/// One 64-bit payload word. Data structures compose larger payloads from
/// multiple locations.
pub type Value = u64;

/// Identifies one 64-byte cache line holding one [`Value`].
///
/// Cheap to clone; ordered and hashed by name.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location(Arc<str>);

impl Location {
    pub fn new(name: impl Into<Arc<str>>) -> Location {
        Location(name.into())
    }

    pub fn name(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Location {
    fn from(s: &str) -> Location {
        Location::new(s)
    }
}

impl From<String> for Location {
    fn from(s: String) -> Location {
        Location::new(s)
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

/// State of one (node, location) line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineState {
    Invalid,
    Clean(Value),
    Dirty(Value),
}

impl LineState {
    pub fn value(self) -> Option<Value> {
        match self {
            LineState::Invalid => None,
            LineState::Clean(v) | LineState::Dirty(v) => Some(v),
        }
    }
}

/// Read-modify-write payloads, kept as indivisible read+write pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmwKind {
    Cas {
        expected: Value,
        new: Value,
        success: bool,
        observed: Value,
    },
    Faa {
        delta: Value,
        old: Value,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Write { value: Value },
    Read { value: Value },
    Flush,
    Rmw(RmwKind),
    /// System-inserted flush representing a hardware cache eviction.
    Evict,
}

/// One recorded operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// Global sequence number, strictly increasing in recording order.
    pub seq: u64,
    pub proc: ProcId,
    pub node: NodeId,
    pub kind: EventKind,
    pub loc: Location,
    /// Sequence numbers of earlier events this event is ordered after
    /// (cross-processor happens-before, e.g. from notifications).
    pub after: Vec<u64>,
}

/// Recorded per-location operation history of a whole execution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    events: Vec<Event>,
    proc_nodes: BTreeMap<ProcId, NodeId>,
}

impl Trace {
    pub fn new(events: Vec<Event>, proc_nodes: BTreeMap<ProcId, NodeId>) -> Trace {
        Trace { events, proc_nodes }
    }

    /// Rebuilds the processor-to-node map from the events themselves.
    pub fn from_events(events: Vec<Event>) -> Trace {
        let mut proc_nodes = BTreeMap::new();
        for ev in &events {
            if ev.proc.is_real() {
                proc_nodes.insert(ev.proc, ev.node);
            }
        }
        Trace { events, proc_nodes }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn node_of(&self, p: ProcId) -> Option<NodeId> {
        if p == ProcId::INIT {
            Some(NodeId::INIT)
        } else {
            self.proc_nodes.get(&p).copied()
        }
    }

    pub fn proc_nodes(&self) -> &BTreeMap<ProcId, NodeId> {
        &self.proc_nodes
    }

    pub fn locations(&self) -> Vec<Location> {
        let mut locs: Vec<Location> = self.events.iter().map(|e| e.loc.clone()).collect();
        locs.sort();
        locs.dedup();
        locs
    }
}

/// Cache eviction policy of a [`MemorySystem`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvictionCfg {
    Off,
    /// Before each user operation, with probability `rate` one currently
    /// cached line (chosen uniformly) is evicted. Reproducible per seed.
    Random { seed: u64, rate: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum MemError {
    #[error("unknown location {0}")]
    UnknownLocation(Location),
    #[error("location {0} initialized twice")]
    DuplicateLocation(Location),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

struct Inner {
    memory: BTreeMap<Location, Value>,
    /// Only Clean/Dirty lines are present; absence means Invalid.
    caches: BTreeMap<NodeId, BTreeMap<Location, LineState>>,
    trace: Vec<Event>,
    pending_edges: HashMap<ProcId, Vec<u64>>,
    eviction: Option<(ChaCha8Rng, f64)>,
}

impl Inner {
    fn record(&mut self, proc: ProcId, node: NodeId, kind: EventKind, loc: &Location) -> u64 {
        let seq = self.trace.len() as u64;
        let after = self.pending_edges.remove(&proc).unwrap_or_default();
        self.trace.push(Event {
            seq,
            proc,
            node,
            kind,
            loc: loc.clone(),
            after,
        });
        seq
    }

    fn line(&self, node: NodeId, loc: &Location) -> LineState {
        self.caches
            .get(&node)
            .and_then(|m| m.get(loc))
            .copied()
            .unwrap_or(LineState::Invalid)
    }

    fn set_line(&mut self, node: NodeId, loc: &Location, state: LineState) {
        match state {
            LineState::Invalid => {
                if let Some(m) = self.caches.get_mut(&node) {
                    m.remove(loc);
                }
            }
            s => {
                self.caches.entry(node).or_default().insert(loc.clone(), s);
            }
        }
    }

    /// Write-back-and-invalidate of one line; returns true if the line
    /// was present at all.
    fn flush_line_silent(&mut self, node: NodeId, loc: &Location) {
        if let LineState::Dirty(v) = self.line(node, loc) {
            self.memory.insert(loc.clone(), v);
        }
        self.set_line(node, loc, LineState::Invalid);
    }

    fn maybe_evict(&mut self) {
        if self.eviction.is_none() {
            return;
        }
        let total: usize = self.caches.values().map(|m| m.len()).sum();
        let (rng, rate) = self.eviction.as_mut().unwrap();
        let rate = (*rate).clamp(0.0, 1.0);
        if !rng.gen_bool(rate) || total == 0 {
            return;
        }
        let mut pick = rng.gen_range(0..total);
        let mut found = None;
        'outer: for (node, lines) in &self.caches {
            for loc in lines.keys() {
                if pick == 0 {
                    found = Some((*node, loc.clone()));
                    break 'outer;
                }
                pick -= 1;
            }
        }
        if let Some((node, loc)) = found {
            self.flush_line_silent(node, &loc);
            self.record(ProcId::SYS, node, EventKind::Evict, &loc);
        }
    }
}

/// Global memory plus per-node shared caches, recording every operation.
///
/// Shareable across threads; all methods take `&self`.
pub struct MemorySystem {
    topo: Arc<Topology>,
    inner: Mutex<Inner>,
}

impl MemorySystem {
    pub fn new(
        topo: Arc<Topology>,
        init: impl IntoIterator<Item = (Location, Value)>,
        eviction: EvictionCfg,
    ) -> Result<MemorySystem, MemError> {
        let eviction = match eviction {
            EvictionCfg::Off => None,
            EvictionCfg::Random { seed, rate } => Some((ChaCha8Rng::seed_from_u64(seed), rate)),
        };
        let ms = MemorySystem {
            topo,
            inner: Mutex::new(Inner {
                memory: BTreeMap::new(),
                caches: BTreeMap::new(),
                trace: Vec::new(),
                pending_edges: HashMap::new(),
                eviction,
            }),
        };
        for (loc, v) in init {
            ms.register(loc, v)?;
        }
        Ok(ms)
    }

    /// Convenience constructor for a fresh topology.
    pub fn with_topology(
        topo: Topology,
        init: impl IntoIterator<Item = (Location, Value)>,
        eviction: EvictionCfg,
    ) -> Result<MemorySystem, MemError> {
        MemorySystem::new(Arc::new(topo), init, eviction)
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Installs a location with its initial value, recording the synthetic
    /// init write+flush pair attributed to the reserved init processor.
    pub fn register(&self, loc: Location, value: Value) -> Result<(), MemError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.memory.contains_key(&loc) {
            return Err(MemError::DuplicateLocation(loc));
        }
        inner.memory.insert(loc.clone(), value);
        inner.record(ProcId::INIT, NodeId::INIT, EventKind::Write { value }, &loc);
        inner.record(ProcId::INIT, NodeId::INIT, EventKind::Flush, &loc);
        Ok(())
    }

    fn node_of(&self, p: ProcId) -> Result<NodeId, MemError> {
        if !self.topo.contains(p) {
            return Err(MemError::Topology(TopologyError::UnknownProc(p)));
        }
        Ok(self.topo.node_of(p)?)
    }

    pub fn read(&self, p: ProcId, loc: &Location) -> Result<Value, MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        let Some(&mem) = inner.memory.get(loc) else {
            return Err(MemError::UnknownLocation(loc.clone()));
        };
        let value = match inner.line(node, loc) {
            LineState::Clean(v) | LineState::Dirty(v) => v,
            LineState::Invalid => {
                inner.set_line(node, loc, LineState::Clean(mem));
                mem
            }
        };
        inner.record(p, node, EventKind::Read { value }, loc);
        Ok(value)
    }

    pub fn write(&self, p: ProcId, loc: &Location, value: Value) -> Result<(), MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        if !inner.memory.contains_key(loc) {
            return Err(MemError::UnknownLocation(loc.clone()));
        }
        inner.set_line(node, loc, LineState::Dirty(value));
        inner.record(p, node, EventKind::Write { value }, loc);
        Ok(())
    }

    pub fn flush_line(&self, p: ProcId, loc: &Location) -> Result<(), MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        if !inner.memory.contains_key(loc) {
            return Err(MemError::UnknownLocation(loc.clone()));
        }
        inner.flush_line_silent(node, loc);
        inner.record(p, node, EventKind::Flush, loc);
        Ok(())
    }

    /// Flushes every line currently cached by `p`'s node, one Flush event
    /// per touched location.
    pub fn flush_all(&self, p: ProcId) -> Result<(), MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        let locs: Vec<Location> = inner
            .caches
            .get(&node)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default();
        for loc in locs {
            inner.flush_line_silent(node, &loc);
            inner.record(p, node, EventKind::Flush, &loc);
        }
        Ok(())
    }

    /// Compare-and-swap, atomic with respect to the processors of `p`'s
    /// node only. An invalid line loads memory first.
    pub fn atomic_cas(
        &self,
        p: ProcId,
        loc: &Location,
        expected: Value,
        new: Value,
    ) -> Result<(bool, Value), MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        let Some(&mem) = inner.memory.get(loc) else {
            return Err(MemError::UnknownLocation(loc.clone()));
        };
        let observed = match inner.line(node, loc) {
            LineState::Invalid => {
                inner.set_line(node, loc, LineState::Clean(mem));
                mem
            }
            LineState::Clean(v) | LineState::Dirty(v) => v,
        };
        let success = observed == expected;
        if success {
            inner.set_line(node, loc, LineState::Dirty(new));
        }
        inner.record(
            p,
            node,
            EventKind::Rmw(RmwKind::Cas {
                expected,
                new,
                success,
                observed,
            }),
            loc,
        );
        Ok((success, observed))
    }

    /// Fetch-and-add (wrapping), atomic within `p`'s node only.
    pub fn atomic_faa(&self, p: ProcId, loc: &Location, delta: Value) -> Result<Value, MemError> {
        let node = self.node_of(p)?;
        let mut inner = self.inner.lock().unwrap();
        inner.maybe_evict();
        let Some(&mem) = inner.memory.get(loc) else {
            return Err(MemError::UnknownLocation(loc.clone()));
        };
        let old = match inner.line(node, loc) {
            LineState::Invalid => mem,
            LineState::Clean(v) | LineState::Dirty(v) => v,
        };
        inner.set_line(node, loc, LineState::Dirty(old.wrapping_add(delta)));
        inner.record(p, node, EventKind::Rmw(RmwKind::Faa { delta, old }), loc);
        Ok(old)
    }

    /// Non-temporal read: invalidate the node's line, then load memory.
    /// Recorded as a Flush+Read composite.
    pub fn read_bypass(&self, p: ProcId, loc: &Location) -> Result<Value, MemError> {
        self.flush_line(p, loc)?;
        self.read(p, loc)
    }

    /// Non-temporal write: write then write back and invalidate, leaving
    /// memory updated. Recorded as a Write+Flush composite. No cross-node
    /// invalidation happens, which is the defining property of federated
    /// coherence.
    pub fn write_bypass(&self, p: ProcId, loc: &Location, value: Value) -> Result<(), MemError> {
        self.write(p, loc, value)?;
        self.flush_line(p, loc)
    }

    /// Applies flush semantics to `(node, loc)` as a system eviction.
    pub fn inject_eviction(&self, node: NodeId, loc: &Location) {
        let mut inner = self.inner.lock().unwrap();
        inner.flush_line_silent(node, loc);
        inner.record(ProcId::SYS, node, EventKind::Evict, loc);
    }

    /// Sequence number of the latest event issued by `p`, if any.
    pub fn last_seq_of(&self, p: ProcId) -> Option<u64> {
        let inner = self.inner.lock().unwrap();
        inner.trace.iter().rev().find(|e| e.proc == p).map(|e| e.seq)
    }

    /// Sequence number of the latest recorded event overall.
    pub fn last_seq(&self) -> Option<u64> {
        let inner = self.inner.lock().unwrap();
        inner.trace.last().map(|e| e.seq)
    }

    /// Orders the next event issued by `p` after the event `after`
    /// (a cross-processor happens-before edge, e.g. from a notification).
    pub fn add_happens_before(&self, p: ProcId, after: u64) {
        let mut inner = self.inner.lock().unwrap();
        if (after as usize) < inner.trace.len() {
            let edges = inner.pending_edges.entry(p).or_default();
            if !edges.contains(&after) {
                edges.push(after);
            }
        }
    }

    /// Snapshot of all recorded events in issue order.
    pub fn take_trace(&self) -> Trace {
        let inner = self.inner.lock().unwrap();
        let mut proc_nodes = BTreeMap::new();
        for p in self.topo.procs() {
            proc_nodes.insert(p, self.topo.node_of(p).unwrap());
        }
        Trace {
            events: inner.trace.clone(),
            proc_nodes,
        }
    }

    /// Current memory word, bypassing all caches (inspection only; not
    /// recorded).
    pub fn peek_memory(&self, loc: &Location) -> Option<Value> {
        self.inner.lock().unwrap().memory.get(loc).copied()
    }

    /// Current line state (inspection only; not recorded).
    pub fn peek_line(&self, node: NodeId, loc: &Location) -> LineState {
        self.inner.lock().unwrap().line(node, loc)
    }
}
