//! Double-double scalar: an unevaluated sum `hi + lo` of two doubles giving
//! about 106 significand bits.
//!
//! Only used to evaluate objectives for finite differences, where f64
//! cancellation in `f(p+h) - f(p-h)` would otherwise swamp small gradient
//! components. Arithmetic follows the standard error-free transformations
//! (two-sum, fused two-product).

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Num, One, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Default, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN_2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

impl Dd {
    pub const fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p1, p2) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p1, p2 + self.lo * b);
        Dd { hi, lo }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(self.hi.sqrt());
        }
        // One Newton step from the double root doubles the precision.
        let s = Dd::new(self.hi.sqrt());
        s + (self - s * s) / s.mul_f64(2.0)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::zero();
        }
        // x = k·ln2 + r, exp(r) = exp(r/64)^64 with a Taylor series on r/64.
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - LN_2.mul_f64(k)).mul_f64(1.0 / 64.0);
        let mut term = Dd::one();
        let mut acc = Dd::one();
        for n in 1..=18 {
            term = term * r / Dd::new(n as f64);
            acc += term;
        }
        for _ in 0..6 {
            acc = acc * acc;
        }
        let half = (k / 2.0).trunc();
        acc.mul_f64(2f64.powi(half as i32)).mul_f64(2f64.powi((k - half) as i32))
    }

    pub fn ln(self) -> Self {
        if !(self.hi > 0.0) {
            return Dd::new(self.hi.ln());
        }
        // Newton on exp(x) = y from the double guess.
        let mut x = Dd::new(self.hi.ln());
        for _ in 0..2 {
            x = x + self * (-x).exp() - Dd::one();
        }
        x
    }

    pub fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Dd::new(self.hi.signum());
        }
        let e = self.mul_f64(2.0).exp();
        (e - Dd::one()) / (e + Dd::one())
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn trunc(self) -> Self {
        let hi = self.hi.trunc();
        if hi != self.hi {
            return Dd::new(hi);
        }
        let (hi, lo) = quick_two_sum(hi, self.lo.trunc());
        Dd { hi, lo }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::new(v)
    }
}

impl From<Dd> for f64 {
    fn from(v: Dd) -> f64 {
        v.hi + v.lo
    }
}

impl fmt::Debug for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dd({:e} + {:e})", self.hi, self.lo)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            ord => Some(ord),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, b.hi);
        let (hi, lo) = quick_two_sum(p1, p2 + (self.hi * b.lo + self.lo * b.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        // Three rounds of long division on the leading digit.
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, b: Dd) -> Dd {
        self - (self / b).trunc() * b
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, b: Dd) {
        *self = *self + b;
    }
}

impl SubAssign for Dd {
    fn sub_assign(&mut self, b: Dd) {
        *self = *self - b;
    }
}

impl MulAssign for Dd {
    fn mul_assign(&mut self, b: Dd) {
        *self = *self * b;
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::new(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::new)
    }
}

impl Scalar for Dd {
    fn from_f64(v: f64) -> Self {
        Dd::new(v)
    }
    fn value(self) -> f64 {
        f64::from(self)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn sqrt(self) -> Self {
        Dd::sqrt(self)
    }
    fn tanh(self) -> Self {
        Dd::tanh(self)
    }
    fn abs(self) -> Self {
        Dd::abs(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dd(hi: f64, lo_scale: f64) -> Dd {
        Dd::new(hi) + Dd::new(hi * lo_scale)
    }

    #[test]
    fn ln2_tail_is_consistent() {
        // exp(ln 2) = 2 to double-double accuracy.
        let two = LN_2.exp();
        assert!(f64::from(two - Dd::new(2.0)).abs() < 1e-30);
    }

    #[test]
    fn elementary_functions_match_f64_and_invert() {
        for &x in &[-30.0f64, -1.7, -0.3, 1e-3, 0.7, 2.5, 40.0] {
            let a = dd(x, 1e-18);
            let inv = f64::from(a.exp() * (-a).exp() - Dd::one());
            let back = f64::from(a.exp().ln() - a);
            assert!(inv.abs() < 1e-29, "{x}: {inv:e}");
            assert!(back.abs() < 1e-29 * x.abs().max(1.0), "{x}: {back:e}");
            assert!((f64::from(a.exp()) - x.exp()).abs() <= 4e-16 * x.exp());
            assert!((f64::from(a.tanh()) - x.tanh()).abs() < 1e-15);
        }
        let s = Dd::new(2.0).sqrt();
        assert!(f64::from(s * s - Dd::new(2.0)).abs() < 1e-31);
    }

    #[test]
    fn rem_and_ordering() {
        let r = Dd::new(7.5) % Dd::new(2.0);
        assert_eq!(f64::from(r), 1.5);
        assert!(Dd::new(1.0) + Dd::new(1e-20) > Dd::new(1.0));
        assert!(-Dd::new(1.0) < Dd::zero());
    }

    proptest! {
        #[test]
        fn division_inverts_multiplication(a in -2.0f64..2.0, b in 0.1f64..2.0, ta in -1.0f64..1.0, tb in -1.0f64..1.0) {
            let x = dd(a, ta * 1e-17);
            let y = dd(b, tb * 1e-17);
            let back = (x * y) / y - x;
            prop_assert!(f64::from(back).abs() <= 1e-30 * a.abs().max(1e-3));
            let sum = (x + y) - y - x;
            prop_assert!(f64::from(sum).abs() <= 1e-31);
        }
    }
}
