//! Cross-node mutual exclusion from reads and writes only, after
//! Lamport's bakery algorithm. No atomics cross nodes: every shared
//! variable write is followed by a line flush, and every read of another
//! participant's variable is preceded by a flush (invalidation), so all
//! participants effectively operate on memory.
//!
//! Acquisition is a small state machine advanced one memory operation at
//! a time, which lets deterministic tests interleave participants under a
//! seeded scheduler; `acquire` simply steps until entry.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use crate::memcore::{Location, MemorySystem};
use crate::topology::ProcId;

use super::SyncError;

pub struct BakeryLock {
    ms: Arc<MemorySystem>,
    participants: Vec<ProcId>,
    entering: Vec<Location>,
    ticket: Vec<Location>,
    /// Negative-control knob: without read-side flushes participants spin
    /// on stale cached values and mutual exclusion breaks across nodes.
    read_side_flushes: bool,
    holders: Mutex<BTreeSet<ProcId>>,
}

/// Acquisition progress of one participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcquireState {
    proc: ProcId,
    me: usize,
    ticket: u64,
    phase: Phase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    SetEntering,
    ScanMax { j: usize, max: u64 },
    PublishTicket { max: u64 },
    ClearEntering,
    WaitEntering { j: usize },
    WaitTicket { j: usize },
    Done,
}

impl AcquireState {
    pub fn proc(&self) -> ProcId {
        self.proc
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }
}

impl BakeryLock {
    /// Registers the per-participant entering and ticket variables, each
    /// on its own line.
    pub fn new(
        ms: Arc<MemorySystem>,
        name: &str,
        participants: Vec<ProcId>,
        read_side_flushes: bool,
    ) -> Result<BakeryLock, SyncError> {
        let mut entering = Vec::new();
        let mut ticket = Vec::new();
        for (i, _) in participants.iter().enumerate() {
            let e = Location::new(format!("{name}:entering{i}"));
            let t = Location::new(format!("{name}:ticket{i}"));
            ms.register(e.clone(), 0)?;
            ms.register(t.clone(), 0)?;
            entering.push(e);
            ticket.push(t);
        }
        Ok(BakeryLock {
            ms,
            participants,
            entering,
            ticket,
            read_side_flushes,
            holders: Mutex::new(BTreeSet::new()),
        })
    }

    pub fn participants(&self) -> &[ProcId] {
        &self.participants
    }

    fn index_of(&self, p: ProcId) -> Result<usize, SyncError> {
        self.participants
            .iter()
            .position(|&q| q == p)
            .ok_or(SyncError::ReleaseByNonHolder(p))
    }

    fn write_flushed(&self, p: ProcId, loc: &Location, v: u64) -> Result<(), SyncError> {
        self.ms.write(p, loc, v)?;
        self.ms.flush_line(p, loc)?;
        Ok(())
    }

    fn read_fresh(&self, p: ProcId, loc: &Location) -> Result<u64, SyncError> {
        if self.read_side_flushes {
            self.ms.flush_line(p, loc)?;
        }
        Ok(self.ms.read(p, loc)?)
    }

    pub fn begin_acquire(&self, p: ProcId) -> Result<AcquireState, SyncError> {
        let me = self.index_of(p)?;
        Ok(AcquireState {
            proc: p,
            me,
            ticket: 0,
            phase: Phase::SetEntering,
        })
    }

    /// Advances the acquisition by one protocol step (one or two memory
    /// operations). Returns true when the lock is held.
    pub fn step(&self, st: &mut AcquireState) -> Result<bool, SyncError> {
        let n = self.participants.len();
        let me = st.me;
        match st.phase {
            Phase::SetEntering => {
                self.write_flushed(st.proc, &self.entering[me], 1)?;
                st.phase = Phase::ScanMax { j: 0, max: 0 };
            }
            Phase::ScanMax { j, max } => {
                if j == n {
                    st.phase = Phase::PublishTicket { max };
                } else {
                    let t = self.read_fresh(st.proc, &self.ticket[j])?;
                    st.phase = Phase::ScanMax {
                        j: j + 1,
                        max: max.max(t),
                    };
                }
            }
            Phase::PublishTicket { max } => {
                st.ticket = max + 1;
                self.write_flushed(st.proc, &self.ticket[me], st.ticket)?;
                st.phase = Phase::ClearEntering;
            }
            Phase::ClearEntering => {
                self.write_flushed(st.proc, &self.entering[me], 0)?;
                st.phase = Phase::WaitEntering { j: 0 };
            }
            Phase::WaitEntering { j } => {
                if j == n {
                    self.holders.lock().unwrap().insert(st.proc);
                    st.phase = Phase::Done;
                } else if j == me {
                    st.phase = Phase::WaitEntering { j: j + 1 };
                } else {
                    let e = self.read_fresh(st.proc, &self.entering[j])?;
                    if e == 0 {
                        st.phase = Phase::WaitTicket { j };
                    }
                    // else: stay, re-read on the next step
                }
            }
            Phase::WaitTicket { j } => {
                let t = self.read_fresh(st.proc, &self.ticket[j])?;
                if t == 0 || (t, j) > (st.ticket, me) {
                    st.phase = Phase::WaitEntering { j: j + 1 };
                }
            }
            Phase::Done => {}
        }
        Ok(st.phase == Phase::Done)
    }

    /// Blocking acquisition: steps the protocol until entry.
    pub fn acquire(&self, p: ProcId) -> Result<(), SyncError> {
        let mut st = self.begin_acquire(p)?;
        while !self.step(&mut st)? {
            std::thread::yield_now();
        }
        Ok(())
    }

    pub fn release(&self, p: ProcId) -> Result<(), SyncError> {
        let me = self.index_of(p)?;
        if !self.holders.lock().unwrap().remove(&p) {
            return Err(SyncError::ReleaseByNonHolder(p));
        }
        self.write_flushed(p, &self.ticket[me], 0)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::EvictionCfg;
    use crate::topology::{NodeId, Topology, TopologySpec};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn setup(read_side_flushes: bool) -> (Arc<MemorySystem>, BakeryLock) {
        // p0, p1 on node 0; p2, p3 on node 1.
        let topo = Topology::build(&TopologySpec::new(2, 1, 1, 2)).unwrap();
        let ms = Arc::new(MemorySystem::with_topology(topo, [], EvictionCfg::Off).unwrap());
        let procs = vec![ProcId::new(0), ProcId::new(1), ProcId::new(2), ProcId::new(3)];
        let lock = BakeryLock::new(ms.clone(), "lk", procs, read_side_flushes).unwrap();
        (ms, lock)
    }

    #[test]
    fn single_participant_acquires_immediately() {
        let topo = Topology::build(&TopologySpec::new(1, 1, 1, 1)).unwrap();
        let ms = Arc::new(MemorySystem::with_topology(topo, [], EvictionCfg::Off).unwrap());
        let lock = BakeryLock::new(ms, "lk", vec![ProcId::new(0)], true).unwrap();
        lock.acquire(ProcId::new(0)).unwrap();
        lock.release(ProcId::new(0)).unwrap();
    }

    #[test]
    fn release_by_non_holder_rejected() {
        let (_ms, lock) = setup(true);
        assert!(matches!(
            lock.release(ProcId::new(0)),
            Err(SyncError::ReleaseByNonHolder(_))
        ));
        lock.acquire(ProcId::new(0)).unwrap();
        assert!(matches!(
            lock.release(ProcId::new(2)),
            Err(SyncError::ReleaseByNonHolder(_))
        ));
        lock.release(ProcId::new(0)).unwrap();
    }

    /// Drives participants as sessions under a seeded scheduler, counting
    /// simultaneous critical-section occupancy. The step budget guards
    /// against livelock: without read-side flushes, waiters can spin on
    /// stale cached tickets forever.
    fn randomized_run(lock: &BakeryLock, seed: u64, rounds: usize) -> usize {
        randomized_run_bounded(lock, seed, rounds, 100_000).0
    }

    fn randomized_run_bounded(
        lock: &BakeryLock,
        seed: u64,
        rounds: usize,
        max_steps: usize,
    ) -> (usize, bool) {
        #[derive(Clone)]
        enum Session {
            Idle { remaining: usize },
            Acquiring { st: AcquireState, remaining: usize },
            InCs { left: usize, remaining: usize },
            Finished,
        }
        let procs = lock.participants().to_vec();
        let mut rng = StdRng::seed_from_u64(seed);
        let mut sessions: Vec<Session> = procs
            .iter()
            .map(|_| Session::Idle { remaining: rounds })
            .collect();
        let mut in_cs = 0usize;
        let mut violations = 0usize;
        let mut steps = 0usize;
        let mut completed = true;
        loop {
            let live: Vec<usize> = sessions
                .iter()
                .enumerate()
                .filter(|(_, s)| !matches!(s, Session::Finished))
                .map(|(i, _)| i)
                .collect();
            if live.is_empty() {
                break;
            }
            steps += 1;
            if steps > max_steps {
                completed = false;
                break;
            }
            let i = live[rng.gen_range(0..live.len())];
            let p = procs[i];
            match &mut sessions[i] {
                Session::Idle { remaining } => {
                    if *remaining == 0 {
                        sessions[i] = Session::Finished;
                    } else {
                        let remaining = *remaining - 1;
                        sessions[i] = Session::Acquiring {
                            st: lock.begin_acquire(p).unwrap(),
                            remaining,
                        };
                    }
                }
                Session::Acquiring { st, remaining } => {
                    let remaining = *remaining;
                    if lock.step(st).unwrap() {
                        in_cs += 1;
                        if in_cs > 1 {
                            violations += 1;
                        }
                        sessions[i] = Session::InCs { left: 2, remaining };
                    }
                }
                Session::InCs { left, remaining } => {
                    if *left > 0 {
                        *left -= 1;
                    } else {
                        let remaining = *remaining;
                        in_cs -= 1;
                        lock.release(p).unwrap();
                        sessions[i] = Session::Idle { remaining };
                    }
                }
                Session::Finished => {}
            }
        }
        (violations, completed)
    }

    #[test]
    fn mutual_exclusion_under_randomized_schedules() {
        for seed in 0..40 {
            let (_ms, lock) = setup(true);
            let (violations, completed) = randomized_run_bounded(&lock, seed, 1, 200_000);
            assert_eq!(violations, 0, "violation at seed {seed}");
            assert!(completed, "lock stalled at seed {seed}");
        }
    }

    #[test]
    fn counter_rounds_are_exact_under_the_lock() {
        let (ms, lock) = setup(true);
        let ctr = Location::from("ctr");
        ms.register(ctr.clone(), 0).unwrap();
        let rounds = 50;
        // Two cross-node participants alternate under the blocking API.
        std::thread::scope(|scope| {
            for &p in &[ProcId::new(0), ProcId::new(2)] {
                let lock = &lock;
                let ms = &ms;
                let ctr = ctr.clone();
                scope.spawn(move || {
                    for _ in 0..rounds {
                        lock.acquire(p).unwrap();
                        ms.flush_line(p, &ctr).unwrap();
                        let v = ms.read(p, &ctr).unwrap();
                        ms.write(p, &ctr, v + 1).unwrap();
                        ms.flush_line(p, &ctr).unwrap();
                        lock.release(p).unwrap();
                    }
                });
            }
        });
        ms.flush_line(ProcId::new(1), &ctr).unwrap();
        assert_eq!(ms.read(ProcId::new(1), &ctr).unwrap(), 2 * rounds);
    }

    #[test]
    fn negative_control_without_read_flushes_violates_quickly() {
        let mut violations = 0;
        for seed in 0..200 {
            let (_ms, lock) = setup(false);
            violations += randomized_run(&lock, seed, 1);
            if violations > 0 {
                break;
            }
        }
        assert!(
            violations > 0,
            "expected at least one mutual-exclusion violation without read-side flushes"
        );
    }

    #[test]
    fn lock_protocol_trace_is_federated_coherent() {
        use crate::checker::{check_federated_with, project_histories, CheckConfig, NodeMap};
        let (ms, lock) = setup(true);
        let (violations, completed) = randomized_run_bounded(&lock, 11, 1, 200_000);
        assert_eq!(violations, 0);
        assert!(completed);
        let cfg = CheckConfig::default().with_max_events(600);
        for h in project_histories(&ms.take_trace()).unwrap() {
            let v = check_federated_with(&h, NodeMap::Recorded, &cfg).unwrap();
            assert!(v.accepted, "history on {:?} rejected", h.location());
        }
    }
}
