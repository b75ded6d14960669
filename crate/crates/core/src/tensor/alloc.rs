//! Process-wide accounting of tensor buffer bytes.
//!
//! Only tensor payloads are counted; shape vectors and other bookkeeping are
//! not. Counters are global, so measurements that need a clean high-water mark
//! must not overlap with other tensor-allocating work.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static COUNT: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocStats {
    /// Bytes held by tensors that are currently alive.
    pub live_bytes: usize,
    /// High-water mark of `live_bytes` since the last [`reset_peak`].
    pub peak_bytes: usize,
    /// Total number of buffers ever created.
    pub alloc_count: u64,
}

pub fn alloc_stats() -> AllocStats {
    // Read peak after live so the snapshot never shows peak < live.
    let live_bytes = LIVE.load(Ordering::SeqCst);
    let alloc_count = COUNT.load(Ordering::SeqCst);
    let peak_bytes = PEAK.load(Ordering::SeqCst).max(live_bytes);
    AllocStats {
        live_bytes,
        peak_bytes,
        alloc_count,
    }
}

/// Sets the high-water mark to the current live byte count.
pub fn reset_peak() {
    PEAK.store(LIVE.load(Ordering::SeqCst), Ordering::SeqCst);
}

pub(crate) fn record_alloc(bytes: usize) {
    let live = LIVE.fetch_add(bytes, Ordering::SeqCst) + bytes;
    PEAK.fetch_max(live, Ordering::SeqCst);
    COUNT.fetch_add(1, Ordering::SeqCst);
}

pub(crate) fn record_free(bytes: usize) {
    LIVE.fetch_sub(bytes, Ordering::SeqCst);
}
