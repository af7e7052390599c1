//! The element type the tape differentiates.

use ndarray::{LinalgScalar, ScalarOperand};
use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, Neg, SubAssign};

/// Real scalar arithmetic for tensors.
///
/// Implemented for `f32` (training) and `f64` (gradient-check oracles).
/// Methods carry an `s_` prefix to stay unambiguous next to the inherent
/// float methods inside the generic layer code.
pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn s_exp(self) -> Self;
    fn s_ln(self) -> Self;
    fn s_sqrt(self) -> Self;
    fn s_abs(self) -> Self;
    fn s_tanh(self) -> Self;
    fn s_max(self, other: Self) -> Self;
    fn s_min(self, other: Self) -> Self;
    /// Sign with the subgradient convention `sign(0) = 0`.
    fn s_sign0(self) -> Self;
    fn s_is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn s_exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn s_ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn s_sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn s_abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn s_tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn s_max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn s_min(self, other: Self) -> Self {
                <$t>::min(self, other)
            }
            #[inline]
            fn s_sign0(self) -> Self {
                if self > 0.0 {
                    1.0
                } else if self < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            #[inline]
            fn s_is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign0_is_zero_at_zero() {
        assert_eq!(0.0f32.s_sign0(), 0.0);
        assert_eq!(2.5f32.s_sign0(), 1.0);
        assert_eq!((-0.1f64).s_sign0(), -1.0);
    }

    #[test]
    fn f64_round_trip_is_exact_for_f64() {
        let x = 0.123456789f64;
        assert_eq!(f64::from_f64(x), x);
        assert_eq!(x.to_f64(), x);
    }
}
