//! Executable catalog of anomaly and guarantee scenarios.
//!
//! Each case scripts an execution on the simulator, projects the
//! per-location histories, runs all three checkers, and compares the
//! verdicts against the case's expectations. The cross-node anomalies
//! (stale read, broken CAS, broken FAA) are accepted by the federated
//! model and rejected by full coherence; the intra-node cases confirm
//! that the anomalies never happen inside one node.

use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::checker::{
    check_federated_with, check_full_with, check_weak_with, project_histories, CheckConfig,
    NodeMap,
};
use crate::memcore::{EvictionCfg, Location, MemorySystem, Trace};
use crate::synclib::{BakeryLock, Channel};
use crate::topology::{NodeId, ProcId, Topology, TopologySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Expect {
    Accept,
    Reject,
}

/// Expected verdict per coherence model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Expectations {
    pub full: Expect,
    pub weak: Expect,
    pub federated: Expect,
}

/// One scenario: a scripted or seed-randomized execution with expected
/// verdicts for every location it touches.
pub struct LitmusCase {
    pub name: &'static str,
    pub description: &'static str,
    pub expected: Expectations,
    runner: fn(u64) -> CaseRun,
}

struct CaseRun {
    trace: Trace,
    /// Event bound for the checkers; spin-heavy cases need more room.
    check_bound: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum LitmusError {
    #[error("unknown litmus case {0:?}")]
    UnknownCase(String),
}

/// Aggregate outcome of repeated runs of one case.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub case: String,
    pub runs: u32,
    pub pass: u32,
    pub verdicts: VerdictSummary,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictSummary {
    pub full: Expect,
    pub weak: Expect,
    pub federated: Expect,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.pass == self.runs
    }
}

pub fn catalog() -> Vec<LitmusCase> {
    vec![
        LitmusCase {
            name: "L1",
            description: "cross-node stale read: a notification edge forces the read after \
                          the unflushed write, yet the cached value is served",
            expected: Expectations {
                full: Expect::Reject,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l1_stale_read,
        },
        LitmusCase {
            name: "L2",
            description: "cross-node broken atomicity: two CAS both succeed from 0",
            expected: Expectations {
                full: Expect::Reject,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l2_broken_cas,
        },
        LitmusCase {
            name: "L3",
            description: "cross-node broken FAA: two increments move the counter by one",
            expected: Expectations {
                full: Expect::Reject,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l3_broken_faa,
        },
        LitmusCase {
            name: "L4",
            description: "intra-node FAA atomicity: two increments count twice. The weak \
                          model rejects: with per-processor domains the second increment \
                          observes the first without any flush, which only a shared node \
                          cache justifies",
            expected: Expectations {
                full: Expect::Accept,
                weak: Expect::Reject,
                federated: Expect::Accept,
            },
            runner: l4_intra_node_faa,
        },
        LitmusCase {
            name: "L5",
            description: "intra-node read-your-writes",
            expected: Expectations {
                full: Expect::Accept,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l5_read_your_writes,
        },
        LitmusCase {
            name: "L6",
            description: "release-consistency breakage: a lock-protected write without \
                          flushes is invisible to the next holder on another node",
            expected: Expectations {
                full: Expect::Reject,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l6_release_consistency,
        },
        LitmusCase {
            name: "L7",
            description: "bakery lock correctness: flush-disciplined lock and counter \
                          histories are coherent under every model",
            expected: Expectations {
                full: Expect::Accept,
                weak: Expect::Accept,
                federated: Expect::Accept,
            },
            runner: l7_bakery,
        },
    ]
}

/// Executes a case `runs` times and compares the checker verdicts of
/// every location history against the expectations.
pub fn run(name: &str, seed: u64, runs: u32) -> Result<Report, LitmusError> {
    let case = catalog()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| LitmusError::UnknownCase(name.to_string()))?;
    let mut pass = 0;
    let mut failures = Vec::new();
    for i in 0..runs {
        let run = (case.runner)(seed.wrapping_add(i as u64));
        match verify_expectations(&run, &case.expected) {
            Ok(()) => pass += 1,
            Err(msg) => {
                if failures.len() < 3 {
                    failures.push(format!("run {i}: {msg}"));
                }
            }
        }
    }
    Ok(Report {
        case: case.name.to_string(),
        runs,
        pass,
        verdicts: VerdictSummary {
            full: case.expected.full,
            weak: case.expected.weak,
            federated: case.expected.federated,
        },
        failures,
    })
}

fn verify_expectations(run: &CaseRun, expected: &Expectations) -> Result<(), String> {
    let cfg = CheckConfig::default().with_max_events(run.check_bound);
    let histories = project_histories(&run.trace).map_err(|e| e.to_string())?;
    for h in &histories {
        let got_full = check_full_with(h, &cfg).map_err(|e| e.to_string())?.accepted;
        let got_weak = check_weak_with(h, &cfg).map_err(|e| e.to_string())?.accepted;
        let got_fed = check_federated_with(h, NodeMap::Recorded, &cfg)
            .map_err(|e| e.to_string())?
            .accepted;
        for (model, got, want) in [
            ("full", got_full, expected.full),
            ("weak", got_weak, expected.weak),
            ("federated", got_fed, expected.federated),
        ] {
            let want = want == Expect::Accept;
            if got != want {
                return Err(format!(
                    "{model} checker on {:?}: got {}, expected {}",
                    h.location(),
                    if got { "accept" } else { "reject" },
                    if want { "accept" } else { "reject" },
                ));
            }
        }
    }
    Ok(())
}

fn two_nodes() -> (Arc<MemorySystem>, ProcId, ProcId) {
    let topo = Topology::build(&TopologySpec::new(2, 1, 1, 1)).unwrap();
    let ms = Arc::new(
        MemorySystem::with_topology(topo, [(Location::from("x"), 0)], EvictionCfg::Off).unwrap(),
    );
    (ms, ProcId::new(0), ProcId::new(1))
}

fn l1_stale_read(_seed: u64) -> CaseRun {
    let (ms, p0, p1) = two_nodes();
    let x = Location::from("x");
    // Warm the reader's node, write on the other node without flushing,
    // and carry the ordering through a notification.
    assert_eq!(ms.read(p1, &x).unwrap(), 0);
    ms.write(p0, &x, 2).unwrap();
    let ch = Channel::new(ms.clone(), NodeId::new(0), NodeId::new(1));
    ch.send(p0, b"ready").unwrap();
    ch.recv(p1, Duration::ZERO).unwrap();
    let stale = ms.read(p1, &x).unwrap();
    assert_eq!(stale, 0, "the cached value must be served");
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l2_broken_cas(_seed: u64) -> CaseRun {
    let (ms, p0, p1) = two_nodes();
    let x = Location::from("x");
    let a = ms.atomic_cas(p0, &x, 0, 1).unwrap();
    let b = ms.atomic_cas(p1, &x, 0, 1).unwrap();
    assert_eq!((a, b), ((true, 0), (true, 0)), "both CAS must succeed");
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l3_broken_faa(_seed: u64) -> CaseRun {
    let (ms, p0, p1) = two_nodes();
    let x = Location::from("x");
    assert_eq!(ms.atomic_faa(p0, &x, 1).unwrap(), 0);
    assert_eq!(ms.atomic_faa(p1, &x, 1).unwrap(), 0);
    ms.flush_all(p0).unwrap();
    ms.flush_all(p1).unwrap();
    // The counter moved by one, not two.
    assert_eq!(ms.read_bypass(p0, &x).unwrap(), 1);
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l4_intra_node_faa(_seed: u64) -> CaseRun {
    let topo = Topology::build(&TopologySpec::new(1, 1, 1, 2)).unwrap();
    let ms = Arc::new(
        MemorySystem::with_topology(topo, [(Location::from("x"), 0)], EvictionCfg::Off).unwrap(),
    );
    let x = Location::from("x");
    assert_eq!(ms.atomic_faa(ProcId::new(0), &x, 1).unwrap(), 0);
    assert_eq!(ms.atomic_faa(ProcId::new(1), &x, 1).unwrap(), 1);
    assert_eq!(ms.read(ProcId::new(0), &x).unwrap(), 2);
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l5_read_your_writes(_seed: u64) -> CaseRun {
    let topo = Topology::build(&TopologySpec::new(1, 1, 1, 1)).unwrap();
    let ms = Arc::new(
        MemorySystem::with_topology(topo, [(Location::from("x"), 0)], EvictionCfg::Off).unwrap(),
    );
    let x = Location::from("x");
    ms.write(ProcId::new(0), &x, 3).unwrap();
    assert_eq!(ms.read(ProcId::new(0), &x).unwrap(), 3);
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l6_release_consistency(_seed: u64) -> CaseRun {
    let (ms, p0, p1) = two_nodes();
    let x = Location::from("x");
    // The "unlock" is a notification; the protected write was never
    // flushed, so the next holder reads the initial value cold.
    ms.write(p0, &x, 1).unwrap();
    let ch = Channel::new(ms.clone(), NodeId::new(0), NodeId::new(1));
    ch.send(p0, b"unlock").unwrap();
    ch.recv(p1, Duration::ZERO).unwrap();
    assert_eq!(ms.read(p1, &x).unwrap(), 0, "the write must be invisible");
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 20,
    }
}

fn l7_bakery(seed: u64) -> CaseRun {
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let topo = Topology::build(&TopologySpec::new(2, 1, 1, 1)).unwrap();
    let ms = Arc::new(MemorySystem::with_topology(topo, [], EvictionCfg::Off).unwrap());
    let ctr = Location::from("ctr");
    ms.register(ctr.clone(), 0).unwrap();
    let procs = vec![ProcId::new(0), ProcId::new(1)];
    let lock = BakeryLock::new(ms.clone(), "lk", procs.clone(), true).unwrap();

    // Seed-randomized interleaving of two complete lock/increment rounds.
    let mut rng = StdRng::seed_from_u64(seed);
    let rounds = 2usize;
    #[derive(Clone)]
    enum St {
        Idle(usize),
        Acq(crate::synclib::AcquireState, usize),
        Cs(usize, usize),
        Done,
    }
    let mut sessions: Vec<St> = procs.iter().map(|_| St::Idle(rounds)).collect();
    loop {
        let live: Vec<usize> = sessions
            .iter()
            .enumerate()
            .filter(|(_, s)| !matches!(s, St::Done))
            .map(|(i, _)| i)
            .collect();
        if live.is_empty() {
            break;
        }
        let i = live[rng.gen_range(0..live.len())];
        let p = procs[i];
        match &mut sessions[i] {
            St::Idle(0) => sessions[i] = St::Done,
            St::Idle(r) => {
                let r = *r;
                sessions[i] = St::Acq(lock.begin_acquire(p).unwrap(), r - 1);
            }
            St::Acq(st, r) => {
                let r = *r;
                if lock.step(st).unwrap() {
                    sessions[i] = St::Cs(0, r);
                }
            }
            St::Cs(stage, r) => {
                let (stage, r) = (*stage, *r);
                match stage {
                    0 => {
                        ms.flush_line(p, &ctr).unwrap();
                        sessions[i] = St::Cs(1, r);
                    }
                    1 => {
                        let v = ms.read(p, &ctr).unwrap();
                        ms.write(p, &ctr, v + 1).unwrap();
                        sessions[i] = St::Cs(2, r);
                    }
                    _ => {
                        ms.flush_line(p, &ctr).unwrap();
                        lock.release(p).unwrap();
                        sessions[i] = St::Idle(r);
                    }
                }
            }
            St::Done => {}
        }
    }
    assert_eq!(
        ms.read_bypass(ProcId::new(0), &ctr).unwrap(),
        (rounds * procs.len()) as u64,
        "mutual exclusion must make the counter exact"
    );
    CaseRun {
        trace: ms.take_trace(),
        check_bound: 1200,
    }
}
