//! Scalar abstractions.
//!
//! The numeric engine is written against [`Scalar`] so the same code runs in
//! `f32` and `f64`. Cost algebra only needs field arithmetic and is written
//! against [`CostScalar`], which is also implemented for exact rationals.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_rational::Ratio;
use num_traits::{Float, FloatConst, FromPrimitive, Num, ToPrimitive};

/// Floating point type usable by tensors, layers and losses.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`; exact for `f64` itself.
    fn of(v: f64) -> Self;

    /// Widening conversion used at reporting boundaries.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Scalar for FLOP energies and percentages.
///
/// Needs only ring/field operations plus a half-up rounding to hundredths, so
/// `Ratio<i64>` qualifies and gives exact percentages.
pub trait CostScalar: Num + Copy + PartialOrd + FromPrimitive + Debug {
    /// Round half-up to two decimal places.
    fn round_hundredths(self) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl CostScalar for f64 {
    fn round_hundredths(self) -> Self {
        // Nudge by a few ulps so values like 75.005 that are stored slightly
        // below the decimal midpoint still round up.
        let scaled = self * 100.0;
        let nudged = scaled + scaled.abs() * 4.0 * f64::EPSILON;
        (nudged + 0.5).floor() / 100.0
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl CostScalar for f32 {
    fn round_hundredths(self) -> Self {
        let scaled = self * 100.0;
        let nudged = scaled + scaled.abs() * 4.0 * f32::EPSILON;
        (nudged + 0.5).floor() / 100.0
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl CostScalar for Ratio<i64> {
    fn round_hundredths(self) -> Self {
        let hundred = Ratio::from_integer(100);
        let half = Ratio::new(1, 2);
        (self * hundred + half).floor() / hundred
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl CostScalar for Ratio<i128> {
    fn round_hundredths(self) -> Self {
        let hundred = Ratio::from_integer(100);
        let half = Ratio::new(1, 2);
        (self * hundred + half).floor() / hundred
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(78.125f64.round_hundredths(), 78.13);
        assert_eq!(94.047_619f64.round_hundredths(), 94.05);
        assert_eq!(75.0f64.round_hundredths(), 75.0);
        let r = Ratio::<i64>::new(78125, 1000);
        assert_eq!(r.round_hundredths(), Ratio::new(7813, 100));
        let r = Ratio::<i64>::new(-1, 200);
        assert_eq!(r.round_hundredths(), Ratio::from_integer(0));
    }

    #[test]
    fn scalar_conversions() {
        assert_eq!(<f32 as Scalar>::of(0.5), 0.5f32);
        assert_eq!(Scalar::as_f64(0.25f32), 0.25);
    }
}
