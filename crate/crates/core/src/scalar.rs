use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar the whole library is generic over: `f32` or `f64`.
///
/// Extends `num_traits::Float` with the error function (needed by the exact
/// GELU) and infallible conversions to/from `f64` for literals, reports and
/// serialization.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Dtype tag written into manifests and checkpoints.
    const DTYPE: &'static str;

    /// Error function erf(x).
    fn erf(self) -> Self;

    /// Lossy conversion from `f64` (rounds for `f32`).
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    /// Lossy conversion to `f64` (exact for both supported types).
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn erf(self) -> Self {
        libm::erf(self)
    }
}
