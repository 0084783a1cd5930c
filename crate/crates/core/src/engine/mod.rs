//! Deterministic numeric substrate.
//!
//! Everything above this module composes from what lives here: immutable
//! [`Tensor`]s, the seeded [`SeededRng`] stream, the reverse-mode [`Tape`]
//! over a fixed op set, [`grad_check`] for validating every backward against
//! central finite differences, and exact element-count allocation accounting
//! in [`alloc`].
//!
//! Determinism contract: all reductions run in fixed ascending index order
//! and nothing here spawns threads, so identical seed + config produces
//! bit-identical outputs on any platform.

pub mod alloc;
mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use std::sync::atomic::{AtomicBool, Ordering};

/// When true (the default), every op scans its output for NaN/Inf and raises
/// [`crate::Error::NonFinite`] instead of propagating silently. Benchmarks
/// switch it off around timed passes so the scan does not distort timings.
static STRICT_FINITE: AtomicBool = AtomicBool::new(true);

/// Enable or disable the per-op finite scan.
pub fn set_strict_finite(on: bool) {
    STRICT_FINITE.store(on, Ordering::SeqCst);
}

/// Whether the per-op finite scan is active.
pub fn strict_finite() -> bool {
    STRICT_FINITE.load(Ordering::SeqCst)
}
