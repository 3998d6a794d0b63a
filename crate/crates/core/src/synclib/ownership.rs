//! Ownership descriptors: a set of locations treated as a unit, owned by
//! one node at a time. Threads of the owner node access the granularity
//! with plain cached operations and node-local atomics; a transfer
//! flushes the lines and publishes the new owner, either by notification
//! message or through a shared owner-id location that candidates
//! flush-and-read.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::memcore::{EventKind, Location, MemorySystem, Trace};
use crate::topology::{NodeId, ProcId};

use super::{Channel, SyncError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwnershipPolicy {
    /// The owner never changes.
    Static,
    /// Handoff when the owner decides to signal the next owner.
    HandoffOnSignal,
    /// Handoff as part of publishing the data (pipelines, queues).
    HandoffOnPublish,
}

pub enum ChangeMechanism {
    /// The owner notifies the new owner over a channel.
    ByMessage(Arc<Channel>),
    /// The owner id is written to a shared location; candidates poll it
    /// with flush+read.
    BySharedFlag(Location),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferAction {
    FlushLines,
    Notify,
}

pub struct OwnershipDescriptor {
    ms: Arc<MemorySystem>,
    granularity: Vec<Location>,
    policy: OwnershipPolicy,
    mechanism: ChangeMechanism,
    actions: Vec<TransferAction>,
    state: Mutex<OwnerState>,
}

struct OwnerState {
    owner: NodeId,
    /// (trace seq at completion, new owner), for the exclusivity monitor.
    log: Vec<(u64, NodeId)>,
}

impl OwnershipDescriptor {
    pub fn new(
        ms: Arc<MemorySystem>,
        granularity: Vec<Location>,
        policy: OwnershipPolicy,
        mechanism: ChangeMechanism,
        actions: Vec<TransferAction>,
        initial_owner: NodeId,
    ) -> OwnershipDescriptor {
        OwnershipDescriptor {
            ms,
            granularity,
            policy,
            mechanism,
            actions,
            state: Mutex::new(OwnerState {
                owner: initial_owner,
                log: Vec::new(),
            }),
        }
    }

    pub fn granularity(&self) -> &[Location] {
        &self.granularity
    }

    pub fn policy(&self) -> OwnershipPolicy {
        self.policy
    }

    pub fn current_owner(&self) -> NodeId {
        self.state.lock().unwrap().owner
    }

    /// Completed transfers as (trace position, new owner).
    pub fn transfer_log(&self) -> Vec<(u64, NodeId)> {
        self.state.lock().unwrap().log.clone()
    }

    /// Hands the granularity to `new_owner`, driven by a processor of the
    /// current owner: performs the change actions (flushing the lines,
    /// publishing the owner id), then commits the change.
    pub fn transfer(&self, new_owner: NodeId, via_proc: ProcId) -> Result<(), SyncError> {
        let node = self
            .ms
            .topology()
            .node_of(via_proc)
            .map_err(crate::memcore::MemError::from)?;
        {
            let st = self.state.lock().unwrap();
            if node != st.owner {
                return Err(SyncError::OwnershipViolation {
                    node,
                    owner: st.owner,
                });
            }
        }
        if self.policy == OwnershipPolicy::Static && new_owner != node {
            return Err(SyncError::StaticPolicy);
        }
        for action in &self.actions {
            match action {
                TransferAction::FlushLines => {
                    for loc in &self.granularity {
                        self.ms.flush_line(via_proc, loc)?;
                    }
                }
                TransferAction::Notify => match &self.mechanism {
                    ChangeMechanism::ByMessage(ch) => {
                        ch.send(via_proc, &owner_msg(new_owner))?;
                    }
                    ChangeMechanism::BySharedFlag(flag) => {
                        self.ms
                            .write(via_proc, flag, new_owner.index() as u64)?;
                        self.ms.flush_line(via_proc, flag)?;
                    }
                },
            }
        }
        let mut st = self.state.lock().unwrap();
        st.owner = new_owner;
        let seq = self.ms.last_seq().unwrap_or(0);
        st.log.push((seq, new_owner));
        Ok(())
    }

    /// Polls until `proc`'s node is published as the owner: flush+read of
    /// the shared flag, or a channel receive.
    pub fn await_ownership(
        &self,
        proc: ProcId,
        max_polls: usize,
        poll_timeout: Duration,
    ) -> Result<(), SyncError> {
        let node = self
            .ms
            .topology()
            .node_of(proc)
            .map_err(crate::memcore::MemError::from)?;
        for _ in 0..max_polls {
            match &self.mechanism {
                ChangeMechanism::BySharedFlag(flag) => {
                    self.ms.flush_line(proc, flag)?;
                    let v = self.ms.read(proc, flag)?;
                    if v == node.index() as u64 {
                        return Ok(());
                    }
                }
                ChangeMechanism::ByMessage(ch) => {
                    if let Ok(bytes) = ch.recv(proc, poll_timeout) {
                        if bytes == owner_msg(node) {
                            return Ok(());
                        }
                    }
                }
            }
            std::thread::yield_now();
        }
        Err(SyncError::Timeout)
    }
}

fn owner_msg(n: NodeId) -> Vec<u8> {
    format!("owner:{n}").into_bytes()
}

/// Debug-mode monitor: between two completed transfers, only the owner
/// node's processors may touch the granularity locations. System
/// evictions are exempt.
pub fn ownership_monitor(
    trace: &Trace,
    granularity: &[Location],
    initial_owner: NodeId,
    transfers: &[(u64, NodeId)],
) -> Result<(), String> {
    let mut owner = initial_owner;
    let mut next = 0usize;
    for ev in trace.events() {
        while next < transfers.len() && transfers[next].0 <= ev.seq {
            owner = transfers[next].1;
            next += 1;
        }
        if !granularity.contains(&ev.loc) || !ev.proc.is_real() {
            continue;
        }
        if ev.kind == EventKind::Evict {
            continue;
        }
        if ev.node != owner {
            return Err(format!(
                "event {} on {:?} by {} of {}, but {} owns the granularity",
                ev.seq, ev.loc, ev.proc, ev.node, owner
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::EvictionCfg;
    use crate::topology::{Topology, TopologySpec};

    fn setup() -> Arc<MemorySystem> {
        let topo = Topology::build(&TopologySpec::new(2, 1, 1, 2)).unwrap();
        Arc::new(
            MemorySystem::with_topology(
                topo,
                [
                    (Location::from("d0"), 0),
                    (Location::from("d1"), 0),
                    (Location::from("owner"), 0),
                ],
                EvictionCfg::Off,
            )
            .unwrap(),
        )
    }

    fn descriptor(ms: &Arc<MemorySystem>) -> OwnershipDescriptor {
        OwnershipDescriptor::new(
            ms.clone(),
            vec![Location::from("d0"), Location::from("d1")],
            OwnershipPolicy::HandoffOnSignal,
            ChangeMechanism::BySharedFlag(Location::from("owner")),
            vec![TransferAction::FlushLines, TransferAction::Notify],
            NodeId::new(0),
        )
    }

    #[test]
    fn shared_flag_handoff_observed_by_polling() {
        let ms = setup();
        let d = descriptor(&ms);
        let (p0, p2) = (ProcId::new(0), ProcId::new(2));
        ms.write(p0, &Location::from("d0"), 42).unwrap();
        d.transfer(NodeId::new(1), p0).unwrap();
        d.await_ownership(p2, 8, Duration::ZERO).unwrap();
        assert_eq!(d.current_owner(), NodeId::new(1));
        // The flushed data is visible to the new owner after invalidation.
        ms.flush_line(p2, &Location::from("d0")).unwrap();
        assert_eq!(ms.read(p2, &Location::from("d0")).unwrap(), 42);
    }

    #[test]
    fn self_transfer_is_a_flush_noop() {
        let ms = setup();
        let d = descriptor(&ms);
        let before = ms.take_trace().events().len();
        d.transfer(NodeId::new(0), ProcId::new(0)).unwrap();
        assert_eq!(d.current_owner(), NodeId::new(0));
        // Two granularity flushes plus the flag write+flush.
        assert_eq!(ms.take_trace().events().len(), before + 4);
    }

    #[test]
    fn transfer_by_non_owner_rejected() {
        let ms = setup();
        let d = descriptor(&ms);
        let err = d.transfer(NodeId::new(0), ProcId::new(2)).unwrap_err();
        assert!(matches!(err, SyncError::OwnershipViolation { .. }));
    }

    #[test]
    fn static_policy_forbids_owner_change() {
        let ms = setup();
        let d = OwnershipDescriptor::new(
            ms.clone(),
            vec![Location::from("d0")],
            OwnershipPolicy::Static,
            ChangeMechanism::BySharedFlag(Location::from("owner")),
            vec![TransferAction::FlushLines],
            NodeId::new(0),
        );
        assert!(matches!(
            d.transfer(NodeId::new(1), ProcId::new(0)),
            Err(SyncError::StaticPolicy)
        ));
    }

    #[test]
    fn monitor_flags_foreign_access() {
        let ms = setup();
        let d = descriptor(&ms);
        let (p0, p2) = (ProcId::new(0), ProcId::new(2));
        ms.write(p0, &Location::from("d0"), 1).unwrap();
        d.transfer(NodeId::new(1), p0).unwrap();
        ms.flush_line(p2, &Location::from("d0")).unwrap();
        ms.read(p2, &Location::from("d0")).unwrap();
        let ok = ownership_monitor(
            &ms.take_trace(),
            d.granularity(),
            NodeId::new(0),
            &d.transfer_log(),
        );
        assert!(ok.is_ok());

        // A write from the non-owner node violates exclusivity.
        ms.write(p0, &Location::from("d1"), 9).unwrap();
        let err = ownership_monitor(
            &ms.take_trace(),
            d.granularity(),
            NodeId::new(0),
            &d.transfer_log(),
        );
        assert!(err.is_err());
    }
}
