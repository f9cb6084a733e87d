//! Numeric abstraction shared by the geometry, evaluation and prior code.
//!
//! Everything that only needs field arithmetic and ordering is written
//! against [`Scalar`], so the same code runs on `f32`, `f64` and exact
//! rationals. The rational instantiation is what the tests use to compare
//! AP and quota arithmetic bit-for-bit against brute-force oracles.

use std::fmt::{Debug, Display};

use num_rational::Rational64;
use num_traits::{FromPrimitive, Num, ToPrimitive};

pub trait Scalar:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    fn floor(self) -> Self;

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    /// Lossy conversion from a real literal. Exact types round to the nearest
    /// representable value.
    fn from_real(x: f64) -> Self {
        Self::from_f64(x).expect("real not representable in scalar type")
    }

    fn to_real(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }

    fn abs_of(self) -> Self {
        if self < Self::zero() {
            Self::zero() - self
        } else {
            self
        }
    }

    fn half() -> Self {
        Self::one() / (Self::one() + Self::one())
    }
}

impl Scalar for f32 {
    fn floor(self) -> Self {
        f32::floor(self)
    }
}

impl Scalar for f64 {
    fn floor(self) -> Self {
        f64::floor(self)
    }
}

impl Scalar for Rational64 {
    fn floor(self) -> Self {
        Rational64::floor(&self)
    }
}

/// Integer part of a nonnegative scalar as a count.
pub(crate) fn floor_count<T: Scalar>(x: T) -> usize {
    let f = x.floor();
    if f <= T::zero() {
        0
    } else {
        f.to_usize().unwrap_or(usize::MAX)
    }
}
