use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes must conform do not.
    #[error("dimension mismatch in {op}: left shape {left:?}, right shape {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A single operand has a shape the op cannot accept.
    #[error("invalid shape for {op}: {shape:?} ({msg})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// An op produced NaN/Inf while strict finite checking was active.
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// `alloc::report` was called while instrumentation is off.
    #[error("allocation instrumentation is disabled; enable it before requesting a report")]
    InstrumentationDisabled,

    /// Invalid configuration (head counts, ranges, unknown names, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An ODE integration produced a non-finite state.
    #[error("integration produced non-finite state at t = {t}")]
    Integration { t: f64 },

    /// A verification precondition failed (e.g. a pattern that is not an
    /// equivalence relation).
    #[error("verification error: {0}")]
    Verify(String),

    /// Training diverged (loss became non-finite).
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    /// Checkpoint file does not match its manifest.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
