//! High-water accounting of live intermediate node buffers.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::prf::{Seed, SEED_BYTES};

#[derive(Debug, Default)]
pub struct MemTracker {
    current: AtomicU64,
    peak: AtomicU64,
}

impl MemTracker {
    pub fn new() -> Self {
        Self::default()
    }

    fn alloc(&self, bytes: u64) {
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn free(&self, bytes: u64) {
        self.current.fetch_sub(bytes, Ordering::SeqCst);
    }

    /// Zero-filled node buffer whose bytes count as live until dropped.
    pub fn nodes(&self, len: usize) -> NodeBuf<'_> {
        self.alloc((len * SEED_BYTES) as u64);
        NodeBuf {
            nodes: vec![Seed::ZERO; len],
            tracker: self,
        }
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }
}

pub struct NodeBuf<'t> {
    nodes: Vec<Seed>,
    tracker: &'t MemTracker,
}

impl Deref for NodeBuf<'_> {
    type Target = [Seed];
    fn deref(&self) -> &[Seed] {
        &self.nodes
    }
}

impl DerefMut for NodeBuf<'_> {
    fn deref_mut(&mut self) -> &mut [Seed] {
        &mut self.nodes
    }
}

impl Drop for NodeBuf<'_> {
    fn drop(&mut self) {
        self.tracker.free((self.nodes.len() * SEED_BYTES) as u64);
    }
}
