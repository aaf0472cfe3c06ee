//! Byte accounting for cache allocations.
//!
//! Every cache buffer registers its size here through a [`Reservation`],
//! which releases the bytes on drop. An optional budget turns an allocation
//! beyond it into [`Error::OutOfMemory`].

use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a tracked buffer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemKind {
    /// The compact per-prompt prefix cache.
    Prefix,
    /// Physically duplicated prefix cache, one copy per candidate.
    PrefixExpanded,
    /// A single layer's broadcast of the prefix cache, released before the next layer.
    LayerExpansion,
    /// Per-candidate suffix/target cache.
    Candidate,
    /// Full-sequence cache built by a cacheless forward pass.
    FullSequence,
}

impl MemKind {
    pub const ALL: [MemKind; 5] = [
        MemKind::Prefix,
        MemKind::PrefixExpanded,
        MemKind::LayerExpansion,
        MemKind::Candidate,
        MemKind::FullSequence,
    ];

    pub fn is_prefix(self) -> bool {
        matches!(
            self,
            MemKind::Prefix | MemKind::PrefixExpanded | MemKind::LayerExpansion
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemKind::Prefix => "prefix",
            MemKind::PrefixExpanded => "prefix_expanded",
            MemKind::LayerExpansion => "layer_expansion",
            MemKind::Candidate => "candidate",
            MemKind::FullSequence => "full_sequence",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub id: u64,
    pub kind: MemKind,
    /// Positive on allocation, negative on release.
    pub delta: i64,
    pub live_after: usize,
}

#[derive(Debug, Default)]
struct Inner {
    live: usize,
    peak: usize,
    live_by_kind: [usize; 5],
    peak_by_kind: [usize; 5],
    peak_prefix: usize,
    next_id: u64,
    log: Vec<LogEntry>,
}

impl Inner {
    fn live_prefix(&self) -> usize {
        MemKind::ALL
            .iter()
            .filter(|k| k.is_prefix())
            .map(|k| self.live_by_kind[k.index()])
            .sum()
    }
}

#[derive(Debug, Default)]
pub struct Accountant {
    budget: Option<usize>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccountantSnapshot {
    pub live_bytes: usize,
    pub peak_bytes: usize,
    /// Highest simultaneous total of all prefix-holding buffers.
    pub peak_prefix_bytes: usize,
    pub budget: Option<usize>,
}

impl Accountant {
    pub fn new(budget: Option<usize>) -> Arc<Self> {
        Arc::new(Self {
            budget,
            inner: Mutex::default(),
        })
    }

    pub fn unlimited() -> Arc<Self> {
        Self::new(None)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn reserve(self: &Arc<Self>, kind: MemKind, bytes: usize) -> Result<Reservation> {
        let mut inner = self.lock();
        if let Some(budget) = self.budget {
            if inner.live + bytes > budget {
                return Err(Error::OutOfMemory {
                    label: kind.as_str().to_string(),
                    requested: bytes,
                    live: inner.live,
                    budget,
                });
            }
        }
        let id = inner.next_id;
        inner.next_id += 1;
        inner.live += bytes;
        inner.peak = inner.peak.max(inner.live);
        let k = kind.index();
        inner.live_by_kind[k] += bytes;
        inner.peak_by_kind[k] = inner.peak_by_kind[k].max(inner.live_by_kind[k]);
        let lp = inner.live_prefix();
        inner.peak_prefix = inner.peak_prefix.max(lp);
        let live_after = inner.live;
        inner.log.push(LogEntry {
            id,
            kind,
            delta: bytes as i64,
            live_after,
        });
        Ok(Reservation {
            accountant: Arc::clone(self),
            id,
            kind,
            bytes,
        })
    }

    fn release(&self, id: u64, kind: MemKind, bytes: usize) {
        let mut inner = self.lock();
        inner.live -= bytes;
        inner.live_by_kind[kind.index()] -= bytes;
        let live_after = inner.live;
        inner.log.push(LogEntry {
            id,
            kind,
            delta: -(bytes as i64),
            live_after,
        });
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn live(&self) -> usize {
        self.lock().live
    }

    pub fn peak(&self) -> usize {
        self.lock().peak
    }

    pub fn live_of(&self, kind: MemKind) -> usize {
        self.lock().live_by_kind[kind.index()]
    }

    pub fn peak_of(&self, kind: MemKind) -> usize {
        self.lock().peak_by_kind[kind.index()]
    }

    pub fn live_prefix(&self) -> usize {
        self.lock().live_prefix()
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.lock().log.clone()
    }

    pub fn snapshot(&self) -> AccountantSnapshot {
        let inner = self.lock();
        AccountantSnapshot {
            live_bytes: inner.live,
            peak_bytes: inner.peak,
            peak_prefix_bytes: inner.peak_prefix,
            budget: self.budget,
        }
    }
}

/// Live registration of a buffer; releases its bytes when dropped.
#[derive(Debug)]
pub struct Reservation {
    accountant: Arc<Accountant>,
    id: u64,
    kind: MemKind,
    bytes: usize,
}

impl Reservation {
    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn kind(&self) -> MemKind {
        self.kind
    }

    pub fn accountant(&self) -> &Arc<Accountant> {
        &self.accountant
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.accountant.release(self.id, self.kind, self.bytes);
    }
}
