//! Scalar abstraction shared by the plain and the recording engine paths.
//!
//! The dynamics are written once, generic over [`Real`]. `f64` is the
//! reference path, `f32` the throughput path, and [`crate::autodiff::Var`]
//! records every operation on a tape for reverse-mode gradients. Any method
//! with a default body must produce bit-identical primal values across
//! implementations, so overrides for `Var` evaluate through the `f64` impl.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value as `f64`.
    fn value(self) -> f64;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn acos(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::from_f64(c)
    }

    /// `max(self, 0)`; the derivative is zero on the clamped side.
    fn relu(self) -> Self;

    /// Clamp into `[lo, hi]`. Outside the interval the result is a constant,
    /// so gradients through the clamp vanish there.
    fn clamp_const(self, lo: f64, hi: f64) -> Self;

    /// Logistic function `1 / (1 + exp(-self))`.
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }

    /// Bilinear blend of four corner values with fractional offsets `tx`, `ty`.
    fn bilerp(c00: Self, c10: Self, c01: Self, c11: Self, tx: Self, ty: Self) -> Self {
        let one = Self::one();
        let a = c00 * (one - tx) + c10 * tx;
        let b = c01 * (one - tx) + c11 * tx;
        a * (one - ty) + b * ty
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline(always)]
    fn acos(self) -> Self {
        f64::acos(self)
    }
    #[inline(always)]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline(always)]
    fn clamp_const(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn value(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn sin(self) -> Self {
        f32::sin(self)
    }
    #[inline(always)]
    fn cos(self) -> Self {
        f32::cos(self)
    }
    #[inline(always)]
    fn acos(self) -> Self {
        f32::acos(self)
    }
    #[inline(always)]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline(always)]
    fn clamp_const(self, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (lo as f32, hi as f32);
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilerp_hits_corners() {
        let c = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(f64::bilerp(c[0], c[1], c[2], c[3], 0.0, 0.0), 1.0);
        assert_eq!(f64::bilerp(c[0], c[1], c[2], c[3], 1.0, 0.0), 2.0);
        assert_eq!(f64::bilerp(c[0], c[1], c[2], c[3], 0.0, 1.0), 3.0);
        assert_eq!(f64::bilerp(c[0], c[1], c[2], c[3], 1.0, 1.0), 4.0);
    }

    #[test]
    fn sigmoid_tails_do_not_overflow() {
        assert_eq!(f64::sigmoid(-1000.0), 0.0);
        assert_eq!(f64::sigmoid(1000.0), 1.0);
        assert_eq!(f32::sigmoid(-200.0), 0.0);
    }
}
