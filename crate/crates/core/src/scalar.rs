//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All forward computations (attention, prompt generation, mixture
//! regression) are written once against [`Scalar`]. Plain `f64`/`f32`
//! give fast evaluation; [`crate::autodiff::Var`] records the same
//! computation on a tape so gradients come out of the identical code path.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, Neg, SubAssign};

use num_traits::{Float, Num};

/// Real scalar type usable by the numeric kernels.
pub trait Scalar:
    Num + Copy + Debug + PartialOrd + Neg<Output = Self> + AddAssign + SubAssign + MulAssign + 'static
{
    fn from_f64(v: f64) -> Self;

    /// Primal value as a double, dropping any derivative information.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    /// Larger of the two by primal value; ties keep `self`.
    fn max_by_value(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }

    fn powi(self, n: u32) -> Self {
        let mut acc = Self::one();
        for _ in 0..n {
            acc *= self;
        }
        acc
    }
}

macro_rules! impl_scalar_for_float {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn value(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                Float::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                Float::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                Float::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                Float::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                Float::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                Float::is_finite(self)
            }
            #[inline]
            fn powi(self, n: u32) -> Self {
                Float::powi(self, n as i32)
            }
        }
    )*};
}

impl_scalar_for_float!(f32, f64);

/// Sum of an iterator of scalars, starting from zero.
pub fn sum<S: Scalar>(iter: impl IntoIterator<Item = S>) -> S {
    iter.into_iter().fold(S::zero(), |acc, v| acc + v)
}

/// Inner product of two equally long slices.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}
