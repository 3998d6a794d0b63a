//! Single-pass rule evaluation over a totally ordered sequence of steps.
//!
//! This is the independent evaluator behind witness validation and the
//! brute-force checker: given one concrete order (events plus inserted
//! flushes), it walks the sequence once and applies the read rules
//! literally. A read served from the domain's cache must return the value
//! the last local write/read established (rule 2a); a read after a flush
//! must return the value established by the last effective write-back
//! (rule 2b). It shares no state representation with the operational
//! search.

use std::collections::BTreeMap;

use crate::memcore::{Event, EventKind, RmwKind, Value};
use crate::topology::{NodeId, ProcId};

use super::{CheckError, Domain, History, Model, NodeMap, WitnessStep};

#[derive(Clone, Copy, PartialEq)]
enum LineVal {
    Clean(Value),
    Dirty(Value),
}

/// Value-level machine for one location, stepped along a total order.
#[derive(Clone)]
pub(crate) struct Evaluator {
    model: Model,
    mem: Option<Value>,
    last_write: Option<Value>,
    lines: BTreeMap<Domain, LineVal>,
    map: NodeMap,
    node_procs: BTreeMap<NodeId, Vec<ProcId>>,
}

impl Evaluator {
    pub(crate) fn new(h: &History, model: Model, map: NodeMap) -> Evaluator {
        let mut node_procs: BTreeMap<NodeId, Vec<ProcId>> = BTreeMap::new();
        for ev in h.events() {
            if ev.proc.is_real() {
                let e = node_procs.entry(ev.node).or_default();
                if !e.contains(&ev.proc) {
                    e.push(ev.proc);
                }
            }
        }
        Evaluator {
            model,
            mem: None,
            last_write: None,
            lines: BTreeMap::new(),
            map,
            node_procs,
        }
    }

    fn flush(&mut self, d: Domain) {
        if let Some(LineVal::Dirty(v)) = self.lines.remove(&d) {
            self.mem = Some(v);
        }
    }

    pub(crate) fn apply_inserted_flush(&mut self, d: Domain) -> Result<(), String> {
        if self.model != Model::Federated {
            return Err("inserted flushes only exist in the federated model".into());
        }
        self.flush(d);
        Ok(())
    }

    /// Whether a domain currently holds the line (an inserted flush would
    /// not be a no-op).
    pub(crate) fn is_cached(&self, d: Domain) -> bool {
        self.lines.contains_key(&d)
    }

    pub(crate) fn apply(&mut self, ev: &Event) -> Result<(), String> {
        if self.model == Model::Full {
            return self.apply_full(ev);
        }
        // Node evictions under the singleton map flush every processor
        // domain of the node in one step.
        if ev.kind == EventKind::Evict && self.map == NodeMap::Singleton {
            let ds: Vec<Domain> = self
                .node_procs
                .get(&ev.node)
                .map(|ps| ps.iter().map(|&p| Domain::Proc(p)).collect())
                .unwrap_or_default();
            for d in ds {
                self.flush(d);
            }
            return Ok(());
        }
        let d = History::domain_of(ev, self.map);
        match ev.kind {
            EventKind::Write { value } => {
                self.lines.insert(d, LineVal::Dirty(value));
            }
            EventKind::Flush | EventKind::Evict => self.flush(d),
            EventKind::Read { value } => match self.lines.get(&d) {
                Some(LineVal::Clean(x)) | Some(LineVal::Dirty(x)) => {
                    if *x != value {
                        return Err(format!(
                            "rule 2(a): read of {value} at event {} but the domain holds {x}",
                            ev.seq
                        ));
                    }
                }
                None => {
                    if self.mem != Some(value) {
                        return Err(format!(
                            "rule 2(b): read of {value} at event {} but memory holds {:?}",
                            ev.seq, self.mem
                        ));
                    }
                    self.lines.insert(d, LineVal::Clean(value));
                }
            },
            EventKind::Rmw(rmw) => {
                let (observed, success, written) = match rmw {
                    RmwKind::Cas {
                        expected,
                        new,
                        success,
                        observed,
                    } => {
                        if success != (expected == observed) {
                            return Err(format!(
                                "event {}: CAS outcome contradicts its operands",
                                ev.seq
                            ));
                        }
                        (observed, success, new)
                    }
                    RmwKind::Faa { delta, old } => (old, true, old.wrapping_add(delta)),
                };
                let cur = match self.lines.get(&d) {
                    Some(LineVal::Clean(x)) | Some(LineVal::Dirty(x)) => Some(*x),
                    None => self.mem,
                };
                if cur != Some(observed) {
                    return Err(format!(
                        "event {}: atomic observed {observed} but the line/memory holds {cur:?}",
                        ev.seq
                    ));
                }
                if success {
                    self.lines.insert(d, LineVal::Dirty(written));
                } else if !self.lines.contains_key(&d) {
                    self.lines.insert(d, LineVal::Clean(observed));
                }
            }
        }
        Ok(())
    }

    fn apply_full(&mut self, ev: &Event) -> Result<(), String> {
        match ev.kind {
            EventKind::Write { value } => self.last_write = Some(value),
            EventKind::Flush | EventKind::Evict => {}
            EventKind::Read { value } => {
                if self.last_write != Some(value) {
                    return Err(format!(
                        "rule (2): read of {value} at event {} but the last write is {:?}",
                        ev.seq, self.last_write
                    ));
                }
            }
            EventKind::Rmw(rmw) => {
                let (observed, success, written) = match rmw {
                    RmwKind::Cas {
                        expected,
                        new,
                        success,
                        observed,
                    } => {
                        if success != (expected == observed) {
                            return Err(format!(
                                "event {}: CAS outcome contradicts its operands",
                                ev.seq
                            ));
                        }
                        (observed, success, new)
                    }
                    RmwKind::Faa { delta, old } => (old, true, old.wrapping_add(delta)),
                };
                if self.last_write != Some(observed) {
                    return Err(format!(
                        "event {}: atomic observed {observed} but the last write is {:?}",
                        ev.seq, self.last_write
                    ));
                }
                if success {
                    self.last_write = Some(written);
                }
            }
        }
        Ok(())
    }
}

/// Re-validates a witness order independently of the search that produced
/// it: ordering constraints (per-processor order, edges, init prefix
/// first) plus a single pass of literal rule evaluation.
pub fn validate_witness(
    h: &History,
    witness: &[WitnessStep],
    model: Model,
    map: NodeMap,
) -> Result<(), String> {
    let events = h.events();
    let by_seq: BTreeMap<u64, usize> = events.iter().enumerate().map(|(i, e)| (e.seq, i)).collect();
    let real_steps = witness
        .iter()
        .filter(|s| matches!(s, WitnessStep::Event(_)))
        .count();
    if real_steps != events.len() {
        return Err(format!(
            "witness covers {real_steps} events, history has {}",
            events.len()
        ));
    }

    let mut eval = Evaluator::new(h, model, map);
    let mut consumed: BTreeMap<ProcId, usize> = BTreeMap::new();
    let mut seen = vec![false; events.len()];
    let mut per_proc: BTreeMap<ProcId, Vec<usize>> = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        per_proc.entry(ev.proc).or_default().push(i);
    }
    let init_total = per_proc.get(&ProcId::INIT).map_or(0, |v| v.len());
    let mut position = 0usize;

    for step in witness {
        match step {
            WitnessStep::Event(seq) => {
                let &i = by_seq
                    .get(seq)
                    .ok_or_else(|| format!("witness references unknown event {seq}"))?;
                if seen[i] {
                    return Err(format!("event {seq} appears twice in the witness"));
                }
                seen[i] = true;
                let ev = &events[i];
                let chain = &per_proc[&ev.proc];
                let pos = consumed.entry(ev.proc).or_insert(0);
                if chain[*pos] != i {
                    return Err(format!(
                        "event {seq} breaks the issue order of {}",
                        ev.proc
                    ));
                }
                *pos += 1;
                for t in &ev.after {
                    let &ti = by_seq
                        .get(t)
                        .ok_or_else(|| format!("edge target {t} missing"))?;
                    if !seen[ti] {
                        return Err(format!("event {seq} ordered after {t}, which comes later"));
                    }
                }
                if position < init_total && ev.proc != ProcId::INIT {
                    return Err("init prefix must come first".into());
                }
                eval.apply(ev)?;
                position += 1;
            }
            WitnessStep::InsertedFlush { domain } => {
                if position < init_total {
                    return Err("inserted flush before the init prefix".into());
                }
                eval.apply_inserted_flush(*domain)?;
            }
        }
    }
    Ok(())
}

/// Bound guard shared by the brute-force checker.
pub(crate) fn ensure_bound(h: &History, max: usize) -> Result<(), CheckError> {
    if h.len() > max {
        Err(CheckError::BoundExceeded {
            events: h.len(),
            max,
        })
    } else {
        Ok(())
    }
}
