//! Pipeline handoff: items move between stages on distinct nodes through
//! MPMC queues. The sender flushes the item's lines before enqueueing the
//! reference; the receiver invalidates them before its first read, so
//! each stage sees the previous stage's writes.

use std::sync::Arc;

use crate::memcore::{Location, MemorySystem};
use crate::topology::ProcId;

use super::queue::{MpmcQueue, PAYLOAD_BYTES};
use super::SyncError;

/// An item processed by the pipeline: an id carried through the queues
/// plus the locations that make up the item's data.
#[derive(Debug, Clone)]
pub struct PipelineItem {
    pub id: u64,
    pub locations: Vec<Location>,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    /// Invalidate the item's lines at the destination before the first
    /// read. Turning this off is the fault-injection negative control:
    /// warmed destination caches then serve stale fields.
    pub invalidate_at_destination: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            invalidate_at_destination: true,
        }
    }
}

/// Source side of a handoff: flush the item's lines, then enqueue its id.
pub fn handoff_send(q: &MpmcQueue, ms: &MemorySystem, p: ProcId, item: &PipelineItem) -> Result<usize, SyncError> {
    for loc in &item.locations {
        ms.flush_line(p, loc)?;
    }
    let mut payload = [0u8; PAYLOAD_BYTES];
    payload[..8].copy_from_slice(&item.id.to_le_bytes());
    q.enqueue(p, &payload)
}

/// Destination side: dequeue an item id and invalidate its lines before
/// the stage reads them.
pub fn handoff_recv<'a>(
    q: &MpmcQueue,
    ms: &MemorySystem,
    p: ProcId,
    items: &'a [PipelineItem],
    cfg: &PipelineConfig,
) -> Result<Option<&'a PipelineItem>, SyncError> {
    let Some(payload) = q.try_dequeue(p)? else {
        return Ok(None);
    };
    let id = u64::from_le_bytes(payload[..8].try_into().unwrap());
    let item = items
        .iter()
        .find(|it| it.id == id)
        .ok_or(SyncError::UnknownItem(id))?;
    if cfg.invalidate_at_destination {
        for loc in &item.locations {
            ms.flush_line(p, loc)?;
        }
    }
    Ok(Some(item))
}

/// Deterministic pipeline driver: stage 0's processor injects every item;
/// each later stage increments the item's first location and passes it
/// on. Returns the number of items that reached the sink.
///
/// Stages are polled round-robin, so the queues' capacity does not bound
/// the number of items in flight.
pub fn run_pipeline(
    ms: &Arc<MemorySystem>,
    stage_procs: &[ProcId],
    queues: &[Arc<MpmcQueue>],
    items: &[PipelineItem],
    cfg: &PipelineConfig,
) -> Result<usize, SyncError> {
    assert_eq!(
        queues.len() + 1,
        stage_procs.len(),
        "one queue between each pair of consecutive stages"
    );
    if queues.is_empty() {
        // Single-stage pipeline: the identity.
        return Ok(items.len());
    }

    let stages = stage_procs.len();
    let mut pending: Vec<Vec<u64>> = vec![Vec::new(); stages];
    pending[0] = items.iter().map(|it| it.id).collect();
    pending[0].reverse();
    let mut arrived = 0usize;

    let find = |id: u64| items.iter().find(|it| it.id == id).unwrap();

    let mut idle_rounds = 0;
    while idle_rounds < stages + 1 {
        let mut progressed = false;
        // Stage 0 only sends; the last stage only receives.
        for k in 0..stages {
            let p = stage_procs[k];
            if k > 0 {
                while let Some(item) = handoff_recv(&queues[k - 1], ms, p, items, cfg)? {
                    // Process: increment the stage counter field.
                    let field = &item.locations[0];
                    let v = ms.read(p, field)?;
                    ms.write(p, field, v + 1)?;
                    progressed = true;
                    if k == stages - 1 {
                        for loc in &item.locations {
                            ms.flush_line(p, loc)?;
                        }
                        arrived += 1;
                    } else {
                        pending[k].push(item.id);
                    }
                }
            }
            while let Some(&id) = pending[k].last() {
                match handoff_send(&queues[k], ms, p, find(id)) {
                    Ok(_) => {
                        pending[k].pop();
                        progressed = true;
                    }
                    Err(SyncError::QueueFull) => break,
                    Err(e) => return Err(e),
                }
            }
        }
        idle_rounds = if progressed { 0 } else { idle_rounds + 1 };
    }
    Ok(arrived)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memcore::EvictionCfg;
    use crate::topology::{NodeId, Topology, TopologySpec};

    fn pipeline_fixture(
        stages: usize,
        items: usize,
        cfg: &PipelineConfig,
    ) -> (Arc<MemorySystem>, Vec<ProcId>, Vec<Arc<MpmcQueue>>, Vec<PipelineItem>) {
        let topo = Topology::build(&TopologySpec::new(stages as u32, 1, 1, 1)).unwrap();
        let ms = Arc::new(MemorySystem::with_topology(topo, [], EvictionCfg::Off).unwrap());
        let procs: Vec<ProcId> = (0..stages as u32).map(ProcId::new).collect();
        let queues: Vec<Arc<MpmcQueue>> = (1..stages)
            .map(|k| {
                Arc::new(
                    MpmcQueue::create(
                        ms.clone(),
                        &format!("pq{k}"),
                        4,
                        NodeId::new((k - 1) as u32),
                        NodeId::new(k as u32),
                    )
                    .unwrap(),
                )
            })
            .collect();
        let items: Vec<PipelineItem> = (0..items as u64)
            .map(|id| {
                let loc = Location::new(format!("item{id}:f0"));
                ms.register(loc.clone(), 0).unwrap();
                PipelineItem {
                    id,
                    locations: vec![loc],
                }
            })
            .collect();
        let _ = cfg;
        (ms, procs, queues, items)
    }

    #[test]
    fn three_stages_increment_every_item_twice() {
        // Stage 0 injects; stages 1 and 2 each increment: field ends at 2.
        let cfg = PipelineConfig::default();
        let (ms, procs, queues, items) = pipeline_fixture(3, 50, &cfg);
        let arrived = run_pipeline(&ms, &procs, &queues, &items, &cfg).unwrap();
        assert_eq!(arrived, 50);
        let probe = ProcId::new(0);
        for item in &items {
            ms.flush_line(probe, &item.locations[0]).unwrap();
            assert_eq!(ms.read(probe, &item.locations[0]).unwrap(), 2);
        }
    }

    #[test]
    fn single_stage_pipeline_is_identity() {
        let cfg = PipelineConfig::default();
        let (ms, procs, _queues, items) = pipeline_fixture(1, 10, &cfg);
        let arrived = run_pipeline(&ms, &procs[..1], &[], &items, &cfg).unwrap();
        assert_eq!(arrived, 10);
        for item in &items {
            assert_eq!(ms.peek_memory(&item.locations[0]), Some(0));
        }
    }

    #[test]
    fn skipping_destination_invalidate_leaves_stale_fields() {
        let cfg = PipelineConfig {
            invalidate_at_destination: false,
        };
        let (ms, procs, queues, items) = pipeline_fixture(3, 8, &cfg);
        // Warm the downstream caches so plain reads hit stale lines.
        for k in 1..procs.len() {
            for item in &items {
                ms.read(procs[k], &item.locations[0]).unwrap();
            }
        }
        let arrived = run_pipeline(&ms, &procs, &queues, &items, &cfg).unwrap();
        assert_eq!(arrived, 8);
        let probe = ProcId::new(0);
        let mut stale = 0;
        for item in &items {
            ms.flush_line(probe, &item.locations[0]).unwrap();
            if ms.read(probe, &item.locations[0]).unwrap() != 2 {
                stale += 1;
            }
        }
        assert!(stale > 0, "expected stale fields without invalidation");
    }
}
