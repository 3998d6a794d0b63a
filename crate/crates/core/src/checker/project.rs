//! Projection of a trace into per-location histories.
//!
//! Cross-processor edges may point at events on other locations; the
//! projection rewrites them into equivalent per-location edges by
//! propagating, per processor, the latest location event known to happen
//! before it (program order joined with explicit edges). The resulting
//! edge set can contain redundant entries; its transitive closure equals
//! that of the original ordering restricted to the location.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::memcore::{Event, Trace};
use crate::topology::ProcId;

use super::{CheckError, History};

pub fn project_histories(trace: &Trace) -> Result<Vec<History>, CheckError> {
    let mut procs: Vec<ProcId> = trace.events().iter().map(|e| e.proc).collect();
    procs.sort();
    procs.dedup();
    let pidx: HashMap<ProcId, usize> = procs.iter().enumerate().map(|(i, p)| (*p, i)).collect();

    let edge_targets: BTreeSet<u64> = trace
        .events()
        .iter()
        .flat_map(|e| e.after.iter().copied())
        .collect();

    let mut out = Vec::new();
    for loc in trace.locations() {
        // Per processor: latest seq per other processor, on this location,
        // known to happen before its next event.
        let mut frontier: Vec<Vec<Option<u64>>> = vec![vec![None; procs.len()]; procs.len()];
        let mut snapshots: BTreeMap<u64, Vec<Option<u64>>> = BTreeMap::new();
        let mut events = Vec::new();

        for ev in trace.events() {
            let pi = pidx[&ev.proc];
            for t in &ev.after {
                if let Some(snap) = snapshots.get(t) {
                    for (mine, theirs) in frontier[pi].iter_mut().zip(snap) {
                        if theirs > mine {
                            *mine = *theirs;
                        }
                    }
                }
            }
            if ev.loc == loc {
                let after: Vec<u64> = frontier[pi]
                    .iter()
                    .enumerate()
                    .filter(|&(qi, _)| qi != pi)
                    .filter_map(|(_, s)| *s)
                    .collect();
                events.push(Event {
                    after,
                    ..ev.clone()
                });
                frontier[pi][pi] = Some(ev.seq);
            }
            if edge_targets.contains(&ev.seq) {
                snapshots.insert(ev.seq, frontier[pi].clone());
            }
        }
        out.push(History::new(loc, events)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::{EvictionCfg, Location, MemorySystem};
    use crate::topology::{ProcId, Topology, TopologySpec};

    #[test]
    fn edges_rewritten_through_other_locations() {
        // p0 writes x then y; the notification edge points at the y write;
        // the projection onto x must order p2's read after the x write.
        let topo = Topology::build(&TopologySpec::new(2, 1, 1, 1)).unwrap();
        let ms = MemorySystem::with_topology(
            topo,
            [(Location::from("x"), 0), (Location::from("y"), 0)],
            EvictionCfg::Off,
        )
        .unwrap();
        let (p0, p1) = (ProcId::new(0), ProcId::new(1));
        let x = Location::from("x");
        let y = Location::from("y");
        ms.write(p0, &x, 1).unwrap();
        let wx = ms.last_seq_of(p0).unwrap();
        ms.write(p0, &y, 2).unwrap();
        let wy = ms.last_seq_of(p0).unwrap();
        ms.add_happens_before(p1, wy);
        ms.read(p1, &x).unwrap();

        let histories = project_histories(&ms.take_trace()).unwrap();
        let hx = histories.iter().find(|h| h.location() == &x).unwrap();
        let read = hx
            .events()
            .iter()
            .find(|e| e.proc == p1)
            .expect("read present");
        assert_eq!(read.after, vec![wx]);
        // The y history carries the direct edge.
        let hy = histories.iter().find(|h| h.location() == &y).unwrap();
        assert!(hy.events().iter().all(|e| e.proc != p1));
    }

    #[test]
    fn chained_edges_are_transitive() {
        // p0 writes x, notifies p1; p1 reads y (inheriting the edge),
        // notifies p2; p2 reads x. The x history must order p2's read
        // after p0's write even though the middle hop never touches x.
        let topo = Topology::build(&TopologySpec::new(3, 1, 1, 1)).unwrap();
        let ms = MemorySystem::with_topology(
            topo,
            [(Location::from("x"), 0), (Location::from("y"), 0)],
            EvictionCfg::Off,
        )
        .unwrap();
        let (p0, p1, p2) = (ProcId::new(0), ProcId::new(1), ProcId::new(2));
        let x = Location::from("x");
        let y = Location::from("y");
        ms.write(p0, &x, 1).unwrap();
        let wx = ms.last_seq_of(p0).unwrap();
        ms.add_happens_before(p1, wx);
        ms.read(p1, &y).unwrap();
        let ry = ms.last_seq_of(p1).unwrap();
        ms.add_happens_before(p2, ry);
        ms.read(p2, &x).unwrap();

        let histories = project_histories(&ms.take_trace()).unwrap();
        let hx = histories.iter().find(|h| h.location() == &x).unwrap();
        let read = hx.events().iter().find(|e| e.proc == p2).unwrap();
        assert_eq!(read.after, vec![wx]);
    }
}
