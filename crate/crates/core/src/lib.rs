//! Selective Synchronization Attention (SSA) and the Oscillatory
//! Synchronization Network (OSN) block.
//!
//! SSA replaces dot-product attention with a closed-form operator taken from
//! the steady state of the Kuramoto model: each token carries a learnable
//! natural-frequency vector ω and phase vector θ, pairs couple through a
//! Gaussian kernel of their frequency distance, and the attention weight is
//! the phase-locking coherence
//!
//! ```text
//! S_ij = J_ij · sqrt(1 − (Δω_ij / (K·r·J_ij))²)   if Δω_ij ≤ K·r·J_ij, else 0
//! ```
//!
//! The crate is organized around that operator:
//!
//! - [`engine`] — deterministic numeric substrate: tensors, seeded PRNG,
//!   a reverse-mode tape over a fixed op set, finite-difference gradient
//!   checking, and exact allocation accounting.
//! - [`ssa`] — the synchronization attention operator end to end
//!   (projections, coupling, order parameter, lock mask, aggregation).
//! - [`model`] — OSN and baseline pre-norm transformer blocks with exact
//!   parameter counting and deterministic initialization.
//! - [`oracle`] — fixed-step RK4 Kuramoto integrators used as independent
//!   ground truth for the closed form.
//! - [`verify`] — sparsity / universality / gradient-bias / init-structure
//!   verification suites with JSON reports.
//! - [`bench`] — throughput, latency and allocation-count benchmark harness
//!   with power-law scaling fits.
//!
//! All numeric code is generic over the scalar type via [`Scalar`]
//! (`f64` for verification, `f32` selectable for benchmarks); concrete
//! aliases are exported at the crate root.

pub mod bench;
pub mod engine;
pub mod model;
pub mod oracle;
pub mod ssa;
pub mod verify;

mod error;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, the default for verification work.
pub type Tensor64 = engine::Tensor<f64>;
/// Single-precision tensor, selectable for benchmarks.
pub type Tensor32 = engine::Tensor<f32>;
/// Double-precision tape.
pub type Tape64 = engine::Tape<f64>;
/// Single-precision tape.
pub type Tape32 = engine::Tape<f32>;
