//! Scalar abstraction shared by the numerical modules.

use std::fmt::{Debug, Display};
use std::str::FromStr;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar the geometry, solvers, filter and metrics are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances quoted throughout the crate assume `f64`.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + FromStr + Display + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Lossy conversion back to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_round_trip() {
        assert_eq!(<f64 as Real>::lit(0.25), 0.25);
        assert_eq!(<f32 as Real>::lit(0.25), 0.25f32);
        assert_eq!(Real::as_f64(1.5f32), 1.5);
    }
}
