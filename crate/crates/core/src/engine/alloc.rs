//! Exact element-count allocation accounting.
//!
//! Memory is measured as tensor element counts, not OS RSS: portable,
//! deterministic, and directly comparable across runs. Every tensor buffer
//! registers its element count while instrumentation is enabled; the tracker
//! keeps the running live total, its peak, and the cumulative total. Named
//! intermediates (the N×N tensors of the attention variants) additionally
//! record into a per-label breakdown via [`record_label`].

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

static ENABLED: AtomicBool = AtomicBool::new(false);
static TOTAL: AtomicU64 = AtomicU64::new(0);
static LIVE: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);
static LABELS: Mutex<Option<BTreeMap<String, u64>>> = Mutex::new(None);
static SESSION: Mutex<()> = Mutex::new(());

/// Serialize instrumented measurement sections. The counters are process
/// globals, so concurrent measurements would bleed into each other; anything
/// that enables instrumentation and reads a report should hold this guard
/// for the whole section.
pub fn exclusive_session() -> std::sync::MutexGuard<'static, ()> {
    SESSION.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Snapshot of the allocation counters.
///
/// Serializes as `{"peak_elements": int, "total_elements": int,
/// "labels": {label: int}}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct AllocStats {
    pub peak_elements: u64,
    pub total_elements: u64,
    pub labels: BTreeMap<String, u64>,
}

/// Turn instrumentation on. Counters start from their current values; call
/// [`reset`] for a clean slate.
pub fn enable() {
    ENABLED.store(true, Ordering::SeqCst);
}

/// Turn instrumentation off. Live-count bookkeeping for already-tracked
/// buffers still balances on drop.
pub fn disable() {
    ENABLED.store(false, Ordering::SeqCst);
}

/// Whether instrumentation is currently on.
pub fn is_enabled() -> bool {
    ENABLED.load(Ordering::SeqCst)
}

/// Zero all counters and the label table.
pub fn reset() {
    TOTAL.store(0, Ordering::SeqCst);
    LIVE.store(0, Ordering::SeqCst);
    PEAK.store(0, Ordering::SeqCst);
    *LABELS.lock().unwrap() = Some(BTreeMap::new());
}

/// Report the counters. Errors if instrumentation is disabled so silent
/// zeros can never masquerade as measurements.
pub fn report() -> Result<AllocStats> {
    if !is_enabled() {
        return Err(Error::InstrumentationDisabled);
    }
    let labels = LABELS.lock().unwrap().clone().unwrap_or_default();
    Ok(AllocStats {
        peak_elements: PEAK.load(Ordering::SeqCst),
        total_elements: TOTAL.load(Ordering::SeqCst),
        labels,
    })
}

/// Add `elements` to the per-label breakdown (no effect while disabled).
pub fn record_label(label: &str, elements: usize) {
    if !is_enabled() {
        return;
    }
    let mut guard = LABELS.lock().unwrap();
    let map = guard.get_or_insert_with(BTreeMap::new);
    *map.entry(label.to_string()).or_insert(0) += elements as u64;
}

/// Called by tensor buffers at construction. Returns the number of elements
/// to deregister on drop (zero when instrumentation is off).
pub(crate) fn on_alloc(elements: usize) -> usize {
    if !is_enabled() || elements == 0 {
        return 0;
    }
    let n = elements as u64;
    TOTAL.fetch_add(n, Ordering::SeqCst);
    let live = LIVE.fetch_add(n, Ordering::SeqCst) + n;
    PEAK.fetch_max(live, Ordering::SeqCst);
    elements
}

/// Called by tensor buffers on drop with the value `on_alloc` returned.
pub(crate) fn on_free(elements: usize) {
    if elements > 0 {
        LIVE.fetch_sub(elements as u64, Ordering::SeqCst);
    }
}
