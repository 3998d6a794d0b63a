//! Brute-force federated checker: exhaustive enumeration over total
//! orders with explicitly inserted flush events.
//!
//! Unlike the operational search this keeps no visited-state set and owns
//! no transition logic; every candidate order is evaluated by the literal
//! rule evaluator, one step at a time. It exists as an independent oracle
//! for [`check_federated`](super::check_federated) and is only meant for
//! small histories.
//!
//! Insertion pruning: between two consecutive events, inserting more than
//! one flush per domain is never useful (the second acts on an already
//! invalid line), and a flush of an invalid line is a no-op in general.
//! Both prunings can be disabled to validate them against the unpruned
//! search on tiny histories.

use std::collections::BTreeMap;

use crate::topology::ProcId;

use super::replay::{ensure_bound, Evaluator};
use super::{
    CheckError, Culprit, Domain, History, Model, NodeMap, Verdict, WitnessStep,
};

/// Search envelope of the brute-force checker: how many flushes may be
/// inserted and where.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxiomaticOptions {
    /// Histories longer than this are rejected with a bound error.
    pub max_events: usize,
    /// Inserted flushes allowed per domain between consecutive events.
    pub per_gap_limit: usize,
    /// Skip insertions that act on an invalid line.
    pub prune_noop: bool,
    /// Optional cap on the total number of inserted flushes. Zero makes
    /// the search insertion-free.
    pub total_budget: Option<usize>,
}

impl Default for AxiomaticOptions {
    fn default() -> Self {
        AxiomaticOptions {
            max_events: 10,
            per_gap_limit: 1,
            prune_noop: true,
            total_budget: None,
        }
    }
}

impl AxiomaticOptions {
    /// Configuration used to validate the pruning rules: redundant
    /// insertions are explored rather than skipped. A total budget keeps
    /// the redundant tree finite enough to exhaust; removing no-op
    /// flushes from any accepting order preserves its evaluation, so a
    /// modest budget already probes the direction pruning could break.
    pub fn unpruned() -> Self {
        AxiomaticOptions {
            per_gap_limit: 2,
            prune_noop: false,
            total_budget: Some(3),
            ..AxiomaticOptions::default()
        }
    }

    pub fn with_total_budget(mut self, budget: usize) -> Self {
        self.total_budget = Some(budget);
        self
    }

    pub fn with_max_events(mut self, max: usize) -> Self {
        self.max_events = max;
        self
    }
}

pub fn check_federated_axiomatic(
    h: &History,
    map: NodeMap,
    opts: &AxiomaticOptions,
) -> Result<Verdict, CheckError> {
    ensure_bound(h, opts.max_events)?;
    let verdict = |accepted, witness, culprit| Verdict {
        location: h.location().clone(),
        model: Model::Federated,
        accepted,
        witness,
        culprit,
    };
    if h.is_empty() {
        return Ok(verdict(true, Some(vec![]), None));
    }

    let events = h.events();
    // Per-processor chains in ascending processor order.
    let mut per_proc: BTreeMap<ProcId, Vec<usize>> = BTreeMap::new();
    for (i, ev) in events.iter().enumerate() {
        per_proc.entry(ev.proc).or_default().push(i);
    }
    let chains: Vec<(ProcId, Vec<usize>)> = per_proc.into_iter().collect();
    let mut domains: Vec<Domain> = events
        .iter()
        .map(|ev| History::domain_of(ev, map))
        .collect();
    domains.sort();
    domains.dedup();

    let mut search = Ax {
        events,
        chains,
        domains,
        opts: *opts,
        path: Vec::new(),
        blocked: None,
    };
    let mut consumed = vec![0usize; search.chains.len()];
    let mut seen = vec![false; events.len()];
    let eval = Evaluator::new(h, Model::Federated, map);
    let gap = vec![0usize; search.domains.len()];
    let accepted = search.dfs(&mut consumed, &mut seen, eval, gap, 0);

    Ok(verdict(
        accepted,
        accepted.then(|| search.path.clone()),
        if accepted {
            None
        } else {
            search.blocked.take().map(|(_, seq, detail)| Culprit {
                seq,
                rule: "2".into(),
                detail,
            })
        },
    ))
}

struct Ax<'h> {
    events: &'h [crate::memcore::Event],
    chains: Vec<(ProcId, Vec<usize>)>,
    domains: Vec<Domain>,
    opts: AxiomaticOptions,
    path: Vec<WitnessStep>,
    blocked: Option<(usize, u64, String)>,
}

impl Ax<'_> {
    fn note_blocked(&mut self, progress: usize, seq: u64, detail: String) {
        let better = match &self.blocked {
            None => true,
            Some((p, s, _)) => progress > *p || (progress == *p && seq < *s),
        };
        if better {
            self.blocked = Some((progress, seq, detail));
        }
    }

    fn dfs(
        &mut self,
        consumed: &mut [usize],
        seen: &mut [bool],
        eval: Evaluator,
        gap: Vec<usize>,
        inserted_total: usize,
    ) -> bool {
        let progress: usize = consumed.iter().sum();
        if progress == self.events.len() {
            return true;
        }

        let init_chain = self
            .chains
            .iter()
            .position(|(p, _)| *p == ProcId::INIT);
        let init_pending =
            init_chain.is_some_and(|ci| consumed[ci] < self.chains[ci].1.len());

        for ci in 0..self.chains.len() {
            if init_pending && Some(ci) != init_chain {
                continue;
            }
            let Some(&ei) = self.chains[ci].1.get(consumed[ci]) else {
                continue;
            };
            let ev = &self.events[ei];
            let deps_ok = ev.after.iter().all(|t| {
                self.events
                    .iter()
                    .position(|e| e.seq == *t)
                    .is_some_and(|ti| seen[ti])
            });
            if !deps_ok {
                continue;
            }
            let mut next_eval = eval.clone();
            match next_eval.apply(ev) {
                Ok(()) => {
                    consumed[ci] += 1;
                    seen[ei] = true;
                    self.path.push(WitnessStep::Event(ev.seq));
                    let fresh_gap = vec![0usize; self.domains.len()];
                    if self.dfs(consumed, seen, next_eval, fresh_gap, inserted_total) {
                        return true;
                    }
                    self.path.pop();
                    seen[ei] = false;
                    consumed[ci] -= 1;
                }
                Err(detail) => self.note_blocked(progress, ev.seq, detail),
            }
        }

        if !init_pending {
            for di in 0..self.domains.len() {
                if gap[di] >= self.opts.per_gap_limit {
                    continue;
                }
                if let Some(budget) = self.opts.total_budget {
                    if inserted_total >= budget {
                        continue;
                    }
                }
                let d = self.domains[di];
                if self.opts.prune_noop && !eval.is_cached(d) {
                    continue;
                }
                let mut next_eval = eval.clone();
                if next_eval.apply_inserted_flush(d).is_err() {
                    continue;
                }
                let mut next_gap = gap.clone();
                next_gap[di] += 1;
                self.path.push(WitnessStep::InsertedFlush { domain: d });
                if self.dfs(consumed, seen, next_eval, next_gap, inserted_total + 1) {
                    return true;
                }
                self.path.pop();
            }
        }
        false
    }
}
