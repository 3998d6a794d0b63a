//! Shared disaggregated memory with *federated coherence*: caches stay
//! coherent between the processors of a node, but not across nodes, where
//! visibility is governed by explicit or system-inserted flushes.
//!
//! The crate provides:
//!
//! - [`topology`]: machine description (nodes, NUMA and soft-NUMA domains)
//!   with a per-level communication latency function.
//! - [`memcore`]: an operational simulator of the memory model. Every
//!   operation is recorded into a replayable [`memcore::Trace`].
//! - [`checker`]: decision procedures for three per-location coherence
//!   conditions (full, weak flush-based, federated), producing witness
//!   orders or counterexamples.
//! - [`synclib`]: software synchronization paradigms built on the simulated
//!   memory: notifications, ownership handoff, a cross-node MPMC queue, a
//!   bakery lock, immutable items, version numbers, and pipeline handoff.
//! - [`litmus`]: an executable catalog of anomaly and guarantee scenarios
//!   with expected checker verdicts.
//! - [`overhead`]: the coherence-overhead cost model and a discrete-event
//!   contention simulator.

pub mod checker;
pub mod litmus;
pub mod memcore;
pub mod overhead;
pub mod synclib;
pub mod topology;

pub use memcore::{EvictionCfg, Event, EventKind, Location, MemorySystem, Trace, Value};
pub use topology::{NodeId, ProcId, Topology, TopologySpec};
