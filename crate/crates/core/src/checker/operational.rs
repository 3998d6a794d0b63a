//! Operational checkers: memoized depth-first search over reachable
//! machine states.
//!
//! The machine mirrors the simulator: per-domain line states plus one
//! memory cell, both restricted to a single location. An event is enabled
//! when its processor's earlier events and its happens-before targets are
//! consumed and, for reads and atomics, when the machine would produce the
//! recorded value. In the federated model the search may interleave
//! nondeterministic eviction flushes between steps. A history is accepted
//! iff some interleaving consumes every event.

use std::collections::{BTreeMap, HashSet};

use crate::memcore::{Event, EventKind, RmwKind, Value};
use crate::topology::ProcId;

use super::{
    CheckConfig, CheckError, Culprit, Domain, History, Model, NodeMap, Verdict, WitnessStep,
};

pub fn check_full(h: &History) -> Result<Verdict, CheckError> {
    check_full_with(h, &CheckConfig::default())
}

/// Definition of classic cache coherence: a total order extending
/// per-processor order and edges in which every read returns the last
/// preceding write. Flushes and evictions are inert.
pub fn check_full_with(h: &History, cfg: &CheckConfig) -> Result<Verdict, CheckError> {
    run(h, Sem::FullOrder, NodeMap::Recorded, cfg, Model::Full)
}

pub fn check_weak(h: &History) -> Result<Verdict, CheckError> {
    check_weak_with(h, &CheckConfig::default())
}

/// The weak flush-based condition: every processor is its own coherence
/// domain and no flushes are inserted. The convention that every
/// processor flushed at the start is structural here: all lines begin
/// invalid, which is the post-flush state.
pub fn check_weak_with(h: &History, cfg: &CheckConfig) -> Result<Verdict, CheckError> {
    run(
        h,
        Sem::Domains { insertions: false },
        NodeMap::Singleton,
        cfg,
        Model::Weak,
    )
}

pub fn check_federated(h: &History, map: NodeMap) -> Result<Verdict, CheckError> {
    check_federated_with(h, map, &CheckConfig::default())
}

/// Federated coherence: per-node shared caches, with nondeterministic
/// eviction flushes inserted anywhere after the init prefix (unless
/// disabled in the config).
pub fn check_federated_with(
    h: &History,
    map: NodeMap,
    cfg: &CheckConfig,
) -> Result<Verdict, CheckError> {
    run(
        h,
        Sem::Domains {
            insertions: cfg.insertions,
        },
        map,
        cfg,
        Model::Federated,
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Sem {
    /// Definition-1 semantics: track the last written value only.
    FullOrder,
    /// Flush-based semantics over coherence domains.
    Domains { insertions: bool },
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Line {
    Invalid,
    Clean(u16),
    Dirty(u16),
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    consumed: Box<[u16]>,
    lines: Box<[Line]>,
    /// Value-table index + 1 of memory (domain mode) or of the last write
    /// (full mode); 0 when undefined.
    mem: u16,
}

/// What a step does to domain state.
enum Action {
    /// Ordinary event of one domain.
    One(usize),
    /// Eviction that flushes several domains at once (a node eviction
    /// under the singleton map).
    FlushMany(Vec<usize>),
}

struct Compiled<'h> {
    events: &'h [Event],
    /// processor table, ascending, exploration order
    procs: Vec<ProcId>,
    per_proc: Vec<Vec<usize>>,
    /// event index -> (proc index, position within the proc's chain)
    ev_proc: Vec<(usize, usize)>,
    /// event index -> (proc index, position) pairs this event is ordered after
    targets: Vec<Vec<(usize, usize)>>,
    domains: Vec<Domain>,
    actions: Vec<Action>,
    values: Vec<Value>,
}

impl<'h> Compiled<'h> {
    fn build(h: &'h History, map: NodeMap) -> Compiled<'h> {
        let events = h.events();
        let mut procs: Vec<ProcId> = events.iter().map(|e| e.proc).collect();
        procs.sort();
        procs.dedup();

        let proc_idx =
            |p: ProcId| -> usize { procs.iter().position(|&q| q == p).expect("proc present") };
        let mut per_proc: Vec<Vec<usize>> = vec![Vec::new(); procs.len()];
        let mut ev_proc = Vec::with_capacity(events.len());
        let mut seq_to_ev = BTreeMap::new();
        for (i, ev) in events.iter().enumerate() {
            let pi = proc_idx(ev.proc);
            ev_proc.push((pi, per_proc[pi].len()));
            per_proc[pi].push(i);
            seq_to_ev.insert(ev.seq, i);
        }
        let targets = events
            .iter()
            .map(|ev| {
                ev.after
                    .iter()
                    .map(|s| ev_proc[seq_to_ev[s]])
                    .collect()
            })
            .collect();

        // Domain table and per-event actions.
        let mut domain_idx: BTreeMap<Domain, usize> = BTreeMap::new();
        let mut domains = Vec::new();
        let mut intern = |d: Domain, domains: &mut Vec<Domain>| -> usize {
            *domain_idx.entry(d).or_insert_with(|| {
                domains.push(d);
                domains.len() - 1
            })
        };
        // Map node -> processor domains, for evictions under Singleton.
        let mut node_procs: BTreeMap<crate::topology::NodeId, Vec<ProcId>> = BTreeMap::new();
        for ev in events {
            if ev.proc.is_real() {
                let entry = node_procs.entry(ev.node).or_default();
                if !entry.contains(&ev.proc) {
                    entry.push(ev.proc);
                }
            }
        }
        let mut actions = Vec::with_capacity(events.len());
        for ev in events {
            let action = match (map, ev.kind) {
                (NodeMap::Singleton, EventKind::Evict) => {
                    let ds = node_procs
                        .get(&ev.node)
                        .map(|ps| {
                            ps.iter()
                                .map(|&p| intern(Domain::Proc(p), &mut domains))
                                .collect()
                        })
                        .unwrap_or_default();
                    Action::FlushMany(ds)
                }
                _ => Action::One(intern(History::domain_of(ev, map), &mut domains)),
            };
            actions.push(action);
        }

        // Value table: every value the machine can hold.
        let mut values = Vec::new();
        for ev in events {
            match ev.kind {
                EventKind::Write { value } | EventKind::Read { value } => values.push(value),
                EventKind::Rmw(RmwKind::Cas {
                    expected,
                    new,
                    observed,
                    ..
                }) => values.extend([expected, new, observed]),
                EventKind::Rmw(RmwKind::Faa { delta, old }) => {
                    values.extend([old, old.wrapping_add(delta)])
                }
                EventKind::Flush | EventKind::Evict => {}
            }
        }
        values.sort_unstable();
        values.dedup();

        Compiled {
            events,
            procs,
            per_proc,
            ev_proc,
            targets,
            domains,
            actions,
            values,
        }
    }

    fn vidx(&self, v: Value) -> u16 {
        self.values.binary_search(&v).expect("value interned") as u16 + 1
    }
}

struct Search<'c, 'h> {
    c: &'c Compiled<'h>,
    sem: Sem,
    visited: HashSet<State>,
    path: Vec<WitnessStep>,
    /// (progress, seq, rule, detail) of the deepest blocked read.
    blocked: Option<(usize, u64, &'static str, String)>,
}

impl Search<'_, '_> {
    fn note_blocked(&mut self, progress: usize, seq: u64, rule: &'static str, detail: String) {
        let better = match &self.blocked {
            None => true,
            Some((p, s, _, _)) => progress > *p || (progress == *p && seq < *s),
        };
        if better {
            self.blocked = Some((progress, seq, rule, detail));
        }
    }

    /// Applies event `i` to `st`, or reports the rule that failed.
    fn step(&self, st: &State, i: usize) -> Result<State, (&'static str, String)> {
        let ev = &self.c.events[i];
        let mut next = st.clone();
        let (pi, _) = self.c.ev_proc[i];
        next.consumed[pi] += 1;

        match self.sem {
            Sem::FullOrder => {
                match ev.kind {
                    EventKind::Write { value } => next.mem = self.c.vidx(value),
                    EventKind::Flush | EventKind::Evict => {}
                    EventKind::Read { value } => {
                        if st.mem != self.c.vidx(value) {
                            return Err((
                                "(2)",
                                format!("read of {value} does not match the last write"),
                            ));
                        }
                    }
                    EventKind::Rmw(rmw) => {
                        let (observed, success, written) = rmw_parts(rmw);
                        if st.mem != self.c.vidx(observed) {
                            return Err((
                                "(2)",
                                format!("atomic observed {observed}, not the last write"),
                            ));
                        }
                        if let RmwKind::Cas {
                            expected,
                            observed,
                            success: s,
                            ..
                        } = rmw
                        {
                            if s != (expected == observed) {
                                return Err((
                                    "atomicity",
                                    "recorded CAS outcome contradicts its operands".into(),
                                ));
                            }
                        }
                        if success {
                            next.mem = self.c.vidx(written);
                        }
                    }
                }
                Ok(next)
            }
            Sem::Domains { .. } => {
                match &self.c.actions[i] {
                    Action::FlushMany(ds) => {
                        for &d in ds {
                            flush_domain(&mut next, d);
                        }
                        return Ok(next);
                    }
                    Action::One(d) => {
                        let d = *d;
                        match ev.kind {
                            EventKind::Write { value } => {
                                next.lines[d] = Line::Dirty(self.c.vidx(value));
                            }
                            EventKind::Flush | EventKind::Evict => flush_domain(&mut next, d),
                            EventKind::Read { value } => match st.lines[d] {
                                Line::Clean(x) | Line::Dirty(x) => {
                                    if x != self.c.vidx(value) {
                                        return Err((
                                            "2(a)",
                                            format!(
                                                "domain cache holds a different value than the read of {value}"
                                            ),
                                        ));
                                    }
                                }
                                Line::Invalid => {
                                    if st.mem != self.c.vidx(value) {
                                        return Err((
                                            "2(b)",
                                            format!(
                                                "memory does not hold the read value {value} at this point"
                                            ),
                                        ));
                                    }
                                    next.lines[d] = Line::Clean(st.mem);
                                }
                            },
                            EventKind::Rmw(rmw) => {
                                let (observed, success, written) = rmw_parts(rmw);
                                let (cur, rule): (u16, &'static str) = match st.lines[d] {
                                    Line::Clean(x) | Line::Dirty(x) => (x, "2(a)"),
                                    Line::Invalid => (st.mem, "2(b)"),
                                };
                                if cur != self.c.vidx(observed) {
                                    return Err((
                                        rule,
                                        format!("atomic observed {observed}, which is not the current line/memory value"),
                                    ));
                                }
                                if let RmwKind::Cas {
                                    expected,
                                    observed,
                                    success: s,
                                    ..
                                } = rmw
                                {
                                    if s != (expected == observed) {
                                        return Err((
                                            "atomicity",
                                            "recorded CAS outcome contradicts its operands".into(),
                                        ));
                                    }
                                }
                                next.lines[d] = if success {
                                    Line::Dirty(self.c.vidx(written))
                                } else {
                                    match st.lines[d] {
                                        Line::Invalid => Line::Clean(cur),
                                        keep => keep,
                                    }
                                };
                            }
                        }
                        Ok(next)
                    }
                }
            }
        }
    }

    fn dfs(&mut self, st: State) -> bool {
        let progress: usize = st.consumed.iter().map(|&c| c as usize).sum();
        if progress == self.c.events.len() {
            return true;
        }
        if !self.visited.insert(st.clone()) {
            return false;
        }

        // The init prefix is fixed first.
        let init_pi = self.c.procs.iter().position(|&p| p == ProcId::INIT);
        let init_pending = init_pi
            .map(|pi| (st.consumed[pi] as usize) < self.c.per_proc[pi].len())
            .unwrap_or(false);

        for pi in 0..self.c.procs.len() {
            if init_pending && Some(pi) != init_pi {
                continue;
            }
            let next_pos = st.consumed[pi] as usize;
            let Some(&ei) = self.c.per_proc[pi].get(next_pos) else {
                continue;
            };
            let deps_ok = self.c.targets[ei]
                .iter()
                .all(|&(tp, within)| (st.consumed[tp] as usize) > within);
            if !deps_ok {
                continue;
            }
            match self.step(&st, ei) {
                Ok(next) => {
                    self.path.push(WitnessStep::Event(self.c.events[ei].seq));
                    if self.dfs(next) {
                        return true;
                    }
                    self.path.pop();
                }
                Err((rule, detail)) => {
                    self.note_blocked(progress, self.c.events[ei].seq, rule, detail);
                }
            }
        }

        if let Sem::Domains { insertions: true } = self.sem {
            if !init_pending {
                for d in 0..self.c.domains.len() {
                    if st.lines[d] == Line::Invalid {
                        continue;
                    }
                    let mut next = st.clone();
                    flush_domain(&mut next, d);
                    self.path.push(WitnessStep::InsertedFlush {
                        domain: self.c.domains[d],
                    });
                    if self.dfs(next) {
                        return true;
                    }
                    self.path.pop();
                }
            }
        }
        false
    }
}

fn rmw_parts(rmw: RmwKind) -> (Value, bool, Value) {
    match rmw {
        RmwKind::Cas {
            new,
            success,
            observed,
            ..
        } => (observed, success, new),
        RmwKind::Faa { delta, old } => (old, true, old.wrapping_add(delta)),
    }
}

fn flush_domain(st: &mut State, d: usize) {
    if let Line::Dirty(v) = st.lines[d] {
        st.mem = v;
    }
    st.lines[d] = Line::Invalid;
}

fn run(
    h: &History,
    sem: Sem,
    map: NodeMap,
    cfg: &CheckConfig,
    model: Model,
) -> Result<Verdict, CheckError> {
    if h.len() > cfg.max_events {
        return Err(CheckError::BoundExceeded {
            events: h.len(),
            max: cfg.max_events,
        });
    }
    if h.is_empty() {
        return Ok(Verdict {
            location: h.location().clone(),
            model,
            accepted: true,
            witness: Some(vec![]),
            culprit: None,
        });
    }

    let c = Compiled::build(h, map);
    let start = State {
        consumed: vec![0u16; c.procs.len()].into_boxed_slice(),
        lines: vec![Line::Invalid; c.domains.len()].into_boxed_slice(),
        mem: 0,
    };
    let mut search = Search {
        c: &c,
        sem,
        visited: HashSet::new(),
        path: Vec::new(),
        blocked: None,
    };
    let accepted = search.dfs(start);
    Ok(Verdict {
        location: h.location().clone(),
        model,
        accepted,
        witness: accepted.then_some(search.path),
        culprit: if accepted {
            None
        } else {
            search
                .blocked
                .map(|(_, seq, rule, detail)| Culprit {
                    seq,
                    rule: rule.to_string(),
                    detail,
                })
                .or(Some(Culprit {
                    seq: h.events().last().unwrap().seq,
                    rule: "order".into(),
                    detail: "no interleaving satisfies the ordering constraints".into(),
                }))
        },
    })
}
