//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point sample type: `f32` or `f64`.
///
/// Accumulations inside the convolution and metric kernels are always carried
/// out in `f64`, so the conversions below sit on hot paths and must stay cheap.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    /// Tolerance used when checking that kernel weights sum to one.
    fn normalization_tolerance(terms: usize) -> f64 {
        (16.0 * Self::epsilon().as_f64() * terms.max(1) as f64).max(1e-9)
    }
}

impl Real for f32 {}
impl Real for f64 {}
