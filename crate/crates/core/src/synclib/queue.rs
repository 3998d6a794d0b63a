//! Multi-producer multi-consumer queue over a ring of slots in shared
//! disaggregated memory. All producers run on one node, all consumers on
//! a different node.
//!
//! Protocol per payload:
//!
//! 1. A producer claims a free slot (producer-owned, used-bit clear) with
//!    a node-local CAS on the metadata word.
//! 2. It writes the payload words and flushes them, then writes the
//!    metadata word with the ownership bit flipped to the consumer and
//!    flushes it. Publishing the ownership flip strictly after the
//!    payload write-backs keeps the slot intact even if the hardware
//!    evicts lines in arbitrary order.
//! 3. If a notification token is available (the consumer node reported
//!    all cores asleep since the last notification), the producer sends a
//!    wake message with the slot index.
//! 4. Consumer cores race a CAS to clear the used-bit of the frontier
//!    slot; the winner invalidates and reads the payload, returns the
//!    slot by writing the ownership bit back to producer plus a flush,
//!    and every core moves to the next slot.
//! 5. A core finding a producer-owned frontier registers asleep; when all
//!    cores are asleep the last one reports it to the producer node and
//!    becomes the wake-channel poller.
//!
//! The asleep-core registry, cursors, and channels are host-side
//! coordination; every protocol-bearing word lives in simulated memory.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::memcore::{Location, MemorySystem, Trace};
use crate::memcore::{EventKind, RmwKind};
use crate::topology::{NodeId, ProcId};

use super::channel::Channel;
use super::slot::{decode_slot, encode_slot, OWNER_BIT, SLOT_WORDS, USED_BIT};
use super::SyncError;

pub use super::slot::PAYLOAD_BYTES;

pub struct MpmcQueue {
    ms: Arc<MemorySystem>,
    name: String,
    capacity: usize,
    producer_node: NodeId,
    consumer_node: NodeId,
    slots: Vec<Vec<Location>>,
    wake: Channel,
    asleep_reports: Channel,
    prod: Mutex<ProdState>,
    cons: Mutex<ConsState>,
    cons_cv: Condvar,
    stats: StatCells,
}

struct ProdState {
    cursor: usize,
    /// Notification tokens: one initial (the consumer node starts with no
    /// core awake) plus one per received all-asleep report.
    tokens: u64,
}

struct ConsState {
    cursor: usize,
    active: usize,
    asleep: BTreeSet<ProcId>,
    epoch: u64,
    closed: bool,
    poller: Option<ProcId>,
}

#[derive(Default)]
struct StatCells {
    enqueued: AtomicU64,
    delivered: AtomicU64,
    notifications: AtomicU64,
    asleep_signals: AtomicU64,
}

/// Counters of one queue's run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueStats {
    pub enqueued: u64,
    pub delivered: u64,
    pub notifications_sent: u64,
    /// All-asleep reports from the consumer node; the queue additionally
    /// starts in the all-asleep state, so notifications_sent is at most
    /// all_asleep_signals + 1.
    pub all_asleep_signals: u64,
}

impl MpmcQueue {
    pub fn create(
        ms: Arc<MemorySystem>,
        name: &str,
        capacity: usize,
        producer_node: NodeId,
        consumer_node: NodeId,
    ) -> Result<MpmcQueue, SyncError> {
        if capacity == 0 {
            return Err(SyncError::ZeroCapacity);
        }
        if producer_node == consumer_node {
            return Err(SyncError::SameNodeRoles);
        }
        let mut slots = Vec::with_capacity(capacity);
        for s in 0..capacity {
            let mut words = Vec::with_capacity(SLOT_WORDS);
            for w in 0..SLOT_WORDS {
                let loc = Location::new(format!("{name}:s{s}:w{w}"));
                ms.register(loc.clone(), 0)?;
                words.push(loc);
            }
            slots.push(words);
        }
        let wake = Channel::new(ms.clone(), producer_node, consumer_node);
        let asleep_reports = Channel::new(ms.clone(), consumer_node, producer_node);
        Ok(MpmcQueue {
            ms,
            name: name.to_string(),
            capacity,
            producer_node,
            consumer_node,
            slots,
            wake,
            asleep_reports,
            prod: Mutex::new(ProdState {
                cursor: 0,
                tokens: 1,
            }),
            cons: Mutex::new(ConsState {
                cursor: 0,
                active: 0,
                asleep: BTreeSet::new(),
                epoch: 0,
                closed: false,
                poller: None,
            }),
            cons_cv: Condvar::new(),
            stats: StatCells::default(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn producer_node(&self) -> NodeId {
        self.producer_node
    }

    pub fn consumer_node(&self) -> NodeId {
        self.consumer_node
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats {
            enqueued: self.stats.enqueued.load(Ordering::Relaxed),
            delivered: self.stats.delivered.load(Ordering::Relaxed),
            notifications_sent: self.stats.notifications.load(Ordering::Relaxed),
            all_asleep_signals: self.stats.asleep_signals.load(Ordering::Relaxed),
        }
    }

    fn check_node(&self, p: ProcId, node: NodeId) -> Result<(), SyncError> {
        let actual = self
            .ms
            .topology()
            .node_of(p)
            .map_err(crate::memcore::MemError::from)?;
        if actual != node {
            return Err(SyncError::WrongNode { proc: p, node });
        }
        Ok(())
    }

    /// Claims a free slot, publishes the payload, and notifies the
    /// consumer node when a token is available. Returns the slot index,
    /// or queue-full after one unsuccessful scan of the ring.
    pub fn enqueue(&self, p: ProcId, payload: &[u8; PAYLOAD_BYTES]) -> Result<usize, SyncError> {
        self.check_node(p, self.producer_node)?;
        let start = self.prod.lock().unwrap().cursor;
        for i in 0..self.capacity {
            let s = (start + i) % self.capacity;
            let w0 = &self.slots[s][0];
            // The slot may have been returned by the other node; always
            // invalidate before inspecting.
            self.ms.flush_line(p, w0)?;
            let cur = self.ms.read(p, w0)?;
            if cur & (USED_BIT | OWNER_BIT) != 0 {
                continue;
            }
            let (won, _) = self.ms.atomic_cas(p, w0, cur, cur | USED_BIT)?;
            if !won {
                continue;
            }
            let words = encode_slot((USED_BIT | OWNER_BIT) as u8, payload);
            for w in 1..SLOT_WORDS {
                self.ms.write(p, &self.slots[s][w], words[w])?;
            }
            for w in 1..SLOT_WORDS {
                self.ms.flush_line(p, &self.slots[s][w])?;
            }
            self.ms.write(p, w0, words[0])?;
            self.ms.flush_line(p, w0)?;
            self.stats.enqueued.fetch_add(1, Ordering::Relaxed);
            self.after_publish(p, s)?;
            return Ok(s);
        }
        Err(SyncError::QueueFull)
    }

    fn after_publish(&self, p: ProcId, s: usize) -> Result<(), SyncError> {
        let mut prod = self.prod.lock().unwrap();
        prod.cursor = (s + 1) % self.capacity;
        while self.asleep_reports.try_recv(p).is_ok() {
            prod.tokens += 1;
        }
        if prod.tokens > 0 {
            prod.tokens -= 1;
            self.wake.send(p, &(s as u64).to_le_bytes())?;
            self.stats.notifications.fetch_add(1, Ordering::Relaxed);
        }
        Ok(())
    }

    /// Consumes payloads until the queue is closed and drained. Multiple
    /// consumer cores may run this concurrently.
    pub fn dequeue_loop(
        &self,
        p: ProcId,
        mut sink: impl FnMut(&[u8; PAYLOAD_BYTES]),
    ) -> Result<(), SyncError> {
        self.check_node(p, self.consumer_node)?;
        self.cons.lock().unwrap().active += 1;
        let result = self.consume(p, &mut sink);
        {
            let mut c = self.cons.lock().unwrap();
            c.active -= 1;
            c.asleep.remove(&p);
            if c.poller == Some(p) {
                c.poller = None;
            }
        }
        self.cons_cv.notify_all();
        result
    }

    fn consume(
        &self,
        p: ProcId,
        sink: &mut dyn FnMut(&[u8; PAYLOAD_BYTES]),
    ) -> Result<(), SyncError> {
        loop {
            let (s, closed) = {
                let c = self.cons.lock().unwrap();
                (c.cursor, c.closed)
            };
            match self.poll_slot(p, s)? {
                Polled::Delivered(payload) => sink(&payload),
                Polled::Raced => std::thread::yield_now(),
                Polled::Empty => {
                    if closed {
                        return Ok(());
                    }
                    if self.sleep_at(p, s)? {
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Single frontier probe without the sleep protocol, for polling
    /// drivers such as deterministic pipelines.
    pub fn try_dequeue(&self, p: ProcId) -> Result<Option<[u8; PAYLOAD_BYTES]>, SyncError> {
        self.check_node(p, self.consumer_node)?;
        let s = self.cons.lock().unwrap().cursor;
        match self.poll_slot(p, s)? {
            Polled::Delivered(payload) => Ok(Some(payload)),
            _ => Ok(None),
        }
    }

    fn poll_slot(&self, p: ProcId, s: usize) -> Result<Polled, SyncError> {
        let w0 = &self.slots[s][0];
        self.ms.flush_line(p, w0)?;
        let cur = self.ms.read(p, w0)?;
        match cur & (USED_BIT | OWNER_BIT) {
            m if m == (USED_BIT | OWNER_BIT) => {
                let (won, _) = self.ms.atomic_cas(p, w0, cur, cur & !USED_BIT)?;
                if !won {
                    return Ok(Polled::Raced);
                }
                {
                    let mut c = self.cons.lock().unwrap();
                    if c.cursor == s {
                        c.cursor = (s + 1) % self.capacity;
                    }
                }
                let mut words = [0u64; SLOT_WORDS];
                words[0] = cur & !USED_BIT;
                for w in 1..SLOT_WORDS {
                    let lw = &self.slots[s][w];
                    self.ms.flush_line(p, lw)?;
                    words[w] = self.ms.read(p, lw)?;
                }
                let (_, payload) = decode_slot(&words);
                // Return the slot to the producer node before probing on.
                self.ms
                    .write(p, w0, words[0] & !(USED_BIT | OWNER_BIT))?;
                self.ms.flush_line(p, w0)?;
                self.stats.delivered.fetch_add(1, Ordering::Relaxed);
                Ok(Polled::Delivered(payload))
            }
            m if m == OWNER_BIT => Ok(Polled::Raced), // claimed by a peer, in flight
            _ => Ok(Polled::Empty),                   // producer-owned
        }
    }

    /// Registers `p` asleep at frontier `s`; returns true if the loop
    /// should exit (queue closed).
    fn sleep_at(&self, p: ProcId, s: usize) -> Result<bool, SyncError> {
        let epoch;
        let mut report_all_asleep = false;
        {
            let mut c = self.cons.lock().unwrap();
            if c.closed {
                return Ok(true);
            }
            if c.cursor != s {
                return Ok(false);
            }
            c.asleep.insert(p);
            epoch = c.epoch;
            if c.asleep.len() == c.active {
                report_all_asleep = true;
                c.poller = Some(p);
            }
        }
        if report_all_asleep {
            self.stats.asleep_signals.fetch_add(1, Ordering::Relaxed);
            let last = (s + self.capacity - 1) % self.capacity;
            self.asleep_reports.send(p, &(last as u64).to_le_bytes())?;
        }
        // Double-check the frontier after registering: a publication may
        // have raced past the producer's token check, and the all-asleep
        // report above makes any later publication send a wake.
        let w0 = &self.slots[s][0];
        self.ms.flush_line(p, w0)?;
        let cur = self.ms.read(p, w0)?;
        if cur & (USED_BIT | OWNER_BIT) == (USED_BIT | OWNER_BIT) {
            let mut c = self.cons.lock().unwrap();
            c.asleep.remove(&p);
            if c.poller == Some(p) {
                c.poller = None;
            }
            return Ok(false);
        }
        loop {
            let c = self.cons.lock().unwrap();
            if c.closed {
                return Ok(true);
            }
            if c.epoch != epoch || !c.asleep.contains(&p) {
                return Ok(false);
            }
            if c.poller == Some(p) {
                drop(c);
                match self.wake.recv(p, Duration::from_millis(1)) {
                    Ok(_slot_hint) => {
                        let mut c = self.cons.lock().unwrap();
                        c.epoch = c.epoch.wrapping_add(1);
                        c.asleep.clear();
                        c.poller = None;
                        drop(c);
                        self.cons_cv.notify_all();
                        return Ok(false);
                    }
                    Err(SyncError::Timeout) => continue,
                    Err(e) => return Err(e),
                }
            } else {
                let (_g, _t) = self
                    .cons_cv
                    .wait_timeout(c, Duration::from_millis(1))
                    .unwrap();
            }
        }
    }

    /// Marks the queue closed. Call after all enqueues have returned;
    /// consumer loops drain the remaining published slots and exit.
    pub fn close(&self) {
        self.cons.lock().unwrap().closed = true;
        self.cons_cv.notify_all();
    }
}

enum Polled {
    Delivered([u8; PAYLOAD_BYTES]),
    Raced,
    Empty,
}

/// Trace monitor for the slot protocol: the used-bit is set only by a
/// producer-node CAS and cleared only by a consumer-node CAS; the
/// ownership bit flips producer-to-consumer only in producer writes and
/// back only in consumer writes.
pub fn verify_slot_protocol(
    trace: &Trace,
    queue_name: &str,
    producer_node: NodeId,
    consumer_node: NodeId,
) -> Result<(), String> {
    let meta_word = |loc: &Location| {
        let name = loc.name();
        name.starts_with(queue_name) && name.ends_with(":w0") && name[queue_name.len()..].starts_with(":s")
    };
    for ev in trace.events() {
        if !ev.proc.is_real() || !meta_word(&ev.loc) {
            continue;
        }
        match ev.kind {
            EventKind::Rmw(RmwKind::Cas {
                new,
                success: true,
                observed,
                ..
            }) => {
                let set_used = observed & USED_BIT == 0 && new & USED_BIT != 0;
                let cleared_used = observed & USED_BIT != 0 && new & USED_BIT == 0;
                if set_used && ev.node != producer_node {
                    return Err(format!(
                        "event {}: used-bit set by non-producer node {}",
                        ev.seq, ev.node
                    ));
                }
                if cleared_used && ev.node != consumer_node {
                    return Err(format!(
                        "event {}: used-bit cleared by non-consumer node {}",
                        ev.seq, ev.node
                    ));
                }
            }
            EventKind::Write { value } => {
                let owner_consumer = value & OWNER_BIT != 0;
                if owner_consumer && ev.node != producer_node {
                    return Err(format!(
                        "event {}: ownership flipped to consumer by {}",
                        ev.seq, ev.node
                    ));
                }
                if !owner_consumer && ev.node != consumer_node {
                    return Err(format!(
                        "event {}: ownership returned to producer by {}",
                        ev.seq, ev.node
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}
