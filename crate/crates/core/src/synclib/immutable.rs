//! Immutable items with flag-based garbage collection, and versioned
//! cells.
//!
//! A publisher writes an item's payload locations and flushes them all;
//! any node then reads the final bytes with bypass reads (flush + read),
//! and references can be passed across nodes freely. Freeing sets a freed
//! flag in shared memory and flushes; a garbage collector flush-reads the
//! flags and reclaims. Versioned cells attach a monotonically increasing
//! version number so readers across nodes can insist on the version a
//! reference names.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::memcore::{Location, MemorySystem, Value};
use crate::topology::{NodeId, ProcId};

use super::SyncError;

/// Reference to a published immutable item, safe to pass across nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedRef {
    pub item: u64,
    pub len: usize,
    pub version: u64,
}

struct ItemMeta {
    payload: Vec<Location>,
    freed_flag: Location,
    len: usize,
    reclaimed: bool,
}

/// Registry of immutable items in shared memory.
pub struct ImmutableStore {
    ms: Arc<MemorySystem>,
    name: String,
    items: Mutex<BTreeMap<u64, ItemMeta>>,
    next_id: Mutex<u64>,
}

impl ImmutableStore {
    pub fn new(ms: Arc<MemorySystem>, name: &str) -> ImmutableStore {
        ImmutableStore {
            ms,
            name: name.to_string(),
            items: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(0),
        }
    }

    /// Writes the payload into fresh locations and flushes them all; the
    /// item is immutable from here on.
    pub fn publish(&self, p: ProcId, bytes: &[u8]) -> Result<VersionedRef, SyncError> {
        let id = {
            let mut next = self.next_id.lock().unwrap();
            let id = *next;
            *next += 1;
            id
        };
        let words = bytes.len().div_ceil(8).max(1);
        let mut payload = Vec::with_capacity(words);
        for w in 0..words {
            let loc = Location::new(format!("{}:i{id}:w{w}", self.name));
            self.ms.register(loc.clone(), 0)?;
            payload.push(loc);
        }
        let freed_flag = Location::new(format!("{}:i{id}:freed", self.name));
        self.ms.register(freed_flag.clone(), 0)?;

        for (w, loc) in payload.iter().enumerate() {
            let mut word = [0u8; 8];
            for (k, b) in word.iter_mut().enumerate() {
                *b = bytes.get(w * 8 + k).copied().unwrap_or(0);
            }
            self.ms.write(p, loc, u64::from_le_bytes(word))?;
        }
        for loc in &payload {
            self.ms.flush_line(p, loc)?;
        }
        self.items.lock().unwrap().insert(
            id,
            ItemMeta {
                payload,
                freed_flag,
                len: bytes.len(),
                reclaimed: false,
            },
        );
        Ok(VersionedRef {
            item: id,
            len: bytes.len(),
            version: 1,
        })
    }

    /// Reads the item's bytes from any node via bypass reads, after
    /// checking the freed flag.
    pub fn get(&self, p: ProcId, r: &VersionedRef) -> Result<Vec<u8>, SyncError> {
        let items = self.items.lock().unwrap();
        let meta = items.get(&r.item).ok_or(SyncError::UnknownItem(r.item))?;
        let flag = meta.freed_flag.clone();
        let payload = meta.payload.clone();
        let len = meta.len;
        drop(items);

        if self.ms.read_bypass(p, &flag)? != 0 {
            return Err(SyncError::ItemFreed(r.item));
        }
        let mut bytes = Vec::with_capacity(len);
        for loc in &payload {
            let word = self.ms.read_bypass(p, loc)?;
            bytes.extend_from_slice(&word.to_le_bytes());
        }
        bytes.truncate(len);
        Ok(bytes)
    }

    /// Sets the freed flag and flushes it. Freeing twice is an error.
    pub fn free(&self, p: ProcId, r: &VersionedRef) -> Result<(), SyncError> {
        let items = self.items.lock().unwrap();
        let meta = items.get(&r.item).ok_or(SyncError::UnknownItem(r.item))?;
        let flag = meta.freed_flag.clone();
        drop(items);

        if self.ms.read_bypass(p, &flag)? != 0 {
            return Err(SyncError::DoubleFree(r.item));
        }
        self.ms.write(p, &flag, 1)?;
        self.ms.flush_line(p, &flag)?;
        Ok(())
    }

    /// Flush-reads every live item's freed flag and reclaims the set
    /// ones; returns how many were reclaimed in this sweep.
    pub fn gc_sweep(&self, p: ProcId) -> Result<usize, SyncError> {
        let candidates: Vec<(u64, Location)> = {
            let items = self.items.lock().unwrap();
            items
                .iter()
                .filter(|(_, m)| !m.reclaimed)
                .map(|(id, m)| (*id, m.freed_flag.clone()))
                .collect()
        };
        let mut count = 0;
        for (id, flag) in candidates {
            self.ms.flush_line(p, &flag)?;
            if self.ms.read(p, &flag)? != 0 {
                self.items.lock().unwrap().get_mut(&id).unwrap().reclaimed = true;
                count += 1;
            }
        }
        Ok(count)
    }
}

/// A mutable cell whose payload carries an embedded, monotonically
/// increasing version number.
pub struct VersionedCell {
    ms: Arc<MemorySystem>,
    version_loc: Location,
    len_loc: Location,
    payload: Vec<Location>,
    capacity: usize,
    /// When set, writes must come from this node (ownership precondition).
    owner: Mutex<Option<NodeId>>,
}

impl VersionedCell {
    pub fn new(
        ms: Arc<MemorySystem>,
        name: &str,
        capacity: usize,
        owner: Option<NodeId>,
    ) -> Result<VersionedCell, SyncError> {
        let version_loc = Location::new(format!("{name}:version"));
        let len_loc = Location::new(format!("{name}:len"));
        ms.register(version_loc.clone(), 0)?;
        ms.register(len_loc.clone(), 0)?;
        let words = capacity.div_ceil(8).max(1);
        let mut payload = Vec::with_capacity(words);
        for w in 0..words {
            let loc = Location::new(format!("{name}:w{w}"));
            ms.register(loc.clone(), 0)?;
            payload.push(loc);
        }
        Ok(VersionedCell {
            ms,
            version_loc,
            len_loc,
            payload,
            capacity,
            owner: Mutex::new(owner),
        })
    }

    pub fn set_owner(&self, owner: Option<NodeId>) {
        *self.owner.lock().unwrap() = owner;
    }

    /// Writes the payload, bumps the version, and flushes payload first,
    /// version last, so a reader that sees the new version also finds the
    /// new bytes in memory.
    pub fn write(&self, p: ProcId, bytes: &[u8]) -> Result<u64, SyncError> {
        assert!(bytes.len() <= self.capacity, "payload exceeds capacity");
        if let Some(owner) = *self.owner.lock().unwrap() {
            let node = self
                .ms
                .topology()
                .node_of(p)
                .map_err(crate::memcore::MemError::from)?;
            if node != owner {
                return Err(SyncError::OwnershipViolation { node, owner });
            }
        }
        let version = self.ms.read(p, &self.version_loc)? + 1;
        for (w, loc) in self.payload.iter().enumerate() {
            let mut word = [0u8; 8];
            for (k, b) in word.iter_mut().enumerate() {
                *b = bytes.get(w * 8 + k).copied().unwrap_or(0);
            }
            self.ms.write(p, loc, u64::from_le_bytes(word))?;
            self.ms.flush_line(p, loc)?;
        }
        self.ms.write(p, &self.len_loc, bytes.len() as Value)?;
        self.ms.flush_line(p, &self.len_loc)?;
        self.ms.write(p, &self.version_loc, version)?;
        self.ms.flush_line(p, &self.version_loc)?;
        Ok(version)
    }

    /// Flush-reads the cell and compares the embedded version against the
    /// requested one.
    pub fn read(&self, p: ProcId, version: u64) -> Result<Vec<u8>, SyncError> {
        self.ms.flush_line(p, &self.version_loc)?;
        let found = self.ms.read(p, &self.version_loc)?;
        if found != version {
            return Err(SyncError::VersionMismatch {
                requested: version,
                found,
            });
        }
        self.ms.flush_line(p, &self.len_loc)?;
        let len = self.ms.read(p, &self.len_loc)? as usize;
        let mut bytes = Vec::with_capacity(len);
        for loc in &self.payload {
            self.ms.flush_line(p, loc)?;
            bytes.extend_from_slice(&self.ms.read(p, loc)?.to_le_bytes());
        }
        bytes.truncate(len);
        Ok(bytes)
    }
}
