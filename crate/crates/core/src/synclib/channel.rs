//! Reliable FIFO notification channel between two nodes.
//!
//! Channels are in-process simulations of the small-message notification
//! fabric: no loss, no reordering, no duplication. Delivery records a
//! happens-before edge from the sender's latest memory event to the
//! receiver's next one, which is how cross-node ordering reaches the
//! trace and the checkers.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::memcore::MemorySystem;
use crate::topology::{NodeId, ProcId};

use super::SyncError;

struct Msg {
    bytes: Vec<u8>,
    hb: Option<u64>,
}

pub struct Channel {
    ms: Arc<MemorySystem>,
    sender_node: NodeId,
    receiver_node: NodeId,
    latency_ns: f64,
    queue: Mutex<VecDeque<Msg>>,
    ready: Condvar,
}

impl Channel {
    pub fn new(ms: Arc<MemorySystem>, sender_node: NodeId, receiver_node: NodeId) -> Channel {
        let latency_ns = ms.topology().latencies().disagg;
        Channel {
            ms,
            sender_node,
            receiver_node,
            latency_ns,
            queue: Mutex::new(VecDeque::new()),
            ready: Condvar::new(),
        }
    }

    /// Modeled delivery latency (the cross-node level); informational.
    pub fn latency_ns(&self) -> f64 {
        self.latency_ns
    }

    fn check_node(&self, p: ProcId, node: NodeId) -> Result<(), SyncError> {
        let actual = self.ms.topology().node_of(p).map_err(crate::memcore::MemError::from)?;
        if actual != node {
            return Err(SyncError::WrongNode { proc: p, node });
        }
        Ok(())
    }

    pub fn send(&self, from: ProcId, bytes: &[u8]) -> Result<(), SyncError> {
        self.check_node(from, self.sender_node)?;
        if bytes.len() > 64 {
            return Err(SyncError::MessageTooLarge(bytes.len()));
        }
        let hb = self.ms.last_seq_of(from);
        self.queue.lock().unwrap().push_back(Msg {
            bytes: bytes.to_vec(),
            hb,
        });
        self.ready.notify_all();
        Ok(())
    }

    /// Blocks up to `timeout` for the next message. A zero timeout polls.
    pub fn recv(&self, to: ProcId, timeout: Duration) -> Result<Vec<u8>, SyncError> {
        self.check_node(to, self.receiver_node)?;
        let mut q = self.queue.lock().unwrap();
        if q.is_empty() && !timeout.is_zero() {
            let (guard, _) = self
                .ready
                .wait_timeout_while(q, timeout, |q| q.is_empty())
                .unwrap();
            q = guard;
        }
        match q.pop_front() {
            Some(msg) => {
                drop(q);
                if let Some(hb) = msg.hb {
                    self.ms.add_happens_before(to, hb);
                }
                Ok(msg.bytes)
            }
            None => Err(SyncError::Timeout),
        }
    }

    pub fn try_recv(&self, to: ProcId) -> Result<Vec<u8>, SyncError> {
        self.recv(to, Duration::ZERO)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::{EvictionCfg, Location, MemorySystem};
    use crate::topology::{Topology, TopologySpec};

    fn setup() -> (Arc<MemorySystem>, Channel) {
        let topo = Topology::build(&TopologySpec::new(2, 1, 1, 1)).unwrap();
        let ms = Arc::new(
            MemorySystem::with_topology(topo, [(Location::from("x"), 0)], EvictionCfg::Off)
                .unwrap(),
        );
        let ch = Channel::new(ms.clone(), NodeId::new(0), NodeId::new(1));
        (ms, ch)
    }

    #[test]
    fn fifo_delivery() {
        let (_ms, ch) = setup();
        let (p0, p1) = (ProcId::new(0), ProcId::new(1));
        ch.send(p0, b"slot:3").unwrap();
        ch.send(p0, b"slot:4").unwrap();
        assert_eq!(ch.try_recv(p1).unwrap(), b"slot:3");
        assert_eq!(ch.try_recv(p1).unwrap(), b"slot:4");
    }

    #[test]
    fn empty_channel_times_out() {
        let (_ms, ch) = setup();
        assert!(matches!(
            ch.try_recv(ProcId::new(1)),
            Err(SyncError::Timeout)
        ));
    }

    #[test]
    fn wrong_endpoint_is_usage_error() {
        let (_ms, ch) = setup();
        assert!(matches!(
            ch.send(ProcId::new(1), b"x"),
            Err(SyncError::WrongNode { .. })
        ));
        assert!(matches!(
            ch.try_recv(ProcId::new(0)),
            Err(SyncError::WrongNode { .. })
        ));
    }

    #[test]
    fn oversized_message_rejected() {
        let (_ms, ch) = setup();
        assert!(matches!(
            ch.send(ProcId::new(0), &[0u8; 65]),
            Err(SyncError::MessageTooLarge(65))
        ));
    }

    #[test]
    fn delivery_records_happens_before_edge() {
        let (ms, ch) = setup();
        let (p0, p1) = (ProcId::new(0), ProcId::new(1));
        let x = Location::from("x");
        ms.write(p0, &x, 1).unwrap();
        let w = ms.last_seq_of(p0).unwrap();
        ch.send(p0, b"ready").unwrap();
        ch.try_recv(p1).unwrap();
        ms.read(p1, &x).unwrap();
        let tr = ms.take_trace();
        assert_eq!(tr.events().last().unwrap().after, vec![w]);
    }
}
