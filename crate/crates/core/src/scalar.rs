//! Scalar abstraction for bulk numeric data. Everything array-valued in the
//! crate is generic over [`Real`] so the same kernels run in f32 or f64;
//! geometric quantities stay in f64 regardless.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar for volumes, projections, and network tensors.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum<Self>
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (exact for f64, rounded for f32).
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Real")
    }

    /// Widening conversion to f64.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_f32_f64() {
        assert_eq!(f32::of(1.5).as_f64(), 1.5);
        assert_eq!(f64::of(-3400.0), -3400.0);
        let x: f32 = Real::of(0.1);
        assert!((x.as_f64() - 0.1).abs() < 1e-7);
    }
}
