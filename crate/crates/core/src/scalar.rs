//! Scalar abstraction so the math core can run at f32 or f64.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the tensor engine and models.
///
/// Implemented for `f32` and `f64`. All default entry points in this crate
/// use `f64` (see the type aliases at the crate root); the generic form
/// exists so numerically sensitive pieces can be cross-checked at both
/// precisions.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` literal into this scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal not representable")
    }

    /// Lossy view as `f64`, for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifts_literals_at_both_precisions() {
        assert_eq!(f64::of(0.25), 0.25);
        assert_eq!(f32::of(0.25), 0.25f32);
        assert_eq!(1.5f32.as_f64(), 1.5);
    }

    fn generic_sum<S: Real>(xs: &[S]) -> S {
        xs.iter().copied().sum()
    }

    #[test]
    fn generic_code_compiles_for_both() {
        assert_eq!(generic_sum(&[1.0f64, 2.0, 3.0]), 6.0);
        assert_eq!(generic_sum(&[1.0f32, 2.0, 3.0]), 6.0);
    }
}
