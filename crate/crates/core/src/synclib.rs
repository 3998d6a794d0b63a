//! Software synchronization paradigms on top of the simulated memory:
//! notifications, ownership descriptors and handoff, a cross-node MPMC
//! queue, a bakery lock that needs no cross-node atomics, immutable items
//! with garbage collection, version numbers, and pipeline handoff.
//!
//! All shared protocol state lives in simulated memory. The asleep-core
//! registry of the queue and the notification channels are host-side
//! coordination, by design: they stand for the out-of-band notification
//! fabric, not for disaggregated memory.

use thiserror::Error;

use crate::memcore::MemError;
use crate::topology::{NodeId, ProcId};

mod bakery;
mod channel;
mod immutable;
mod ownership;
mod pipeline;
mod queue;
mod slot;

pub use bakery::{AcquireState, BakeryLock};
pub use channel::Channel;
pub use immutable::{ImmutableStore, VersionedCell, VersionedRef};
pub use ownership::{
    ownership_monitor, ChangeMechanism, OwnershipDescriptor, OwnershipPolicy, TransferAction,
};
pub use pipeline::{handoff_recv, handoff_send, run_pipeline, PipelineConfig, PipelineItem};
pub use queue::{MpmcQueue, QueueStats, PAYLOAD_BYTES};
pub use slot::{decode_slot, encode_slot, meta_byte, OWNER_BIT, SLOT_WORDS, USED_BIT};

#[derive(Debug, Error)]
pub enum SyncError {
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("receive timed out")]
    Timeout,
    #[error("{proc} is not on the required node {node}")]
    WrongNode { proc: ProcId, node: NodeId },
    #[error("message of {0} bytes exceeds the 64-byte notification limit")]
    MessageTooLarge(usize),
    #[error("queue full")]
    QueueFull,
    #[error("capacity must be at least 1")]
    ZeroCapacity,
    #[error("producer and consumer roles must be on distinct nodes")]
    SameNodeRoles,
    #[error("{node} does not own the granularity (owner is {owner})")]
    OwnershipViolation { node: NodeId, owner: NodeId },
    #[error("static ownership policy forbids changing the owner")]
    StaticPolicy,
    #[error("release by {0}, which does not hold the lock")]
    ReleaseByNonHolder(ProcId),
    #[error("item {0} was freed")]
    ItemFreed(u64),
    #[error("item {0} freed twice")]
    DoubleFree(u64),
    #[error("unknown item {0}")]
    UnknownItem(u64),
    #[error("version mismatch: requested {requested}, found {found}")]
    VersionMismatch { requested: u64, found: u64 },
}
