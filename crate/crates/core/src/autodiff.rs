//! Minimal reverse-mode automatic differentiation over scalars.
//!
//! Every arithmetic operation on a [`Var`] appends one node to a
//! thread-local tape holding the local partial derivatives with respect to
//! at most two parents. A reverse sweep from the output accumulates
//! adjoints. Constants (created with [`Scalar::from_f64`]) never touch the
//! tape.

use std::cell::RefCell;
use std::fmt;
use std::marker::PhantomData;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Num, One, Zero};

use crate::scalar::Scalar;

const CONST: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

thread_local! {
    static TAPE: RefCell<Vec<Node>> = const { RefCell::new(Vec::new()) };
}

fn push(parents: [u32; 2], partials: [f64; 2]) -> u32 {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let idx = t.len();
        assert!(idx < CONST as usize, "autodiff tape overflow");
        t.push(Node { parents, partials });
        idx as u32
    })
}

/// A scalar tracked on the current thread's tape.
///
/// `Var` is deliberately `!Send`: its index is only meaningful on the
/// thread that created it.
#[derive(Clone, Copy)]
pub struct Var {
    val: f64,
    idx: u32,
    _tape: PhantomData<*const ()>,
}

impl Var {
    fn constant(val: f64) -> Self {
        Var { val, idx: CONST, _tape: PhantomData }
    }

    /// New independent variable on the tape.
    pub fn leaf(val: f64) -> Self {
        let idx = push([CONST, CONST], [0.0, 0.0]);
        Var { val, idx, _tape: PhantomData }
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }

    fn unary(self, val: f64, d: f64) -> Var {
        if self.is_constant() {
            return Var::constant(val);
        }
        let idx = push([self.idx, CONST], [d, 0.0]);
        Var { val, idx, _tape: PhantomData }
    }

    fn binary(self, other: Var, val: f64, da: f64, db: f64) -> Var {
        match (self.is_constant(), other.is_constant()) {
            (true, true) => Var::constant(val),
            (false, true) => self.unary(val, da),
            (true, false) => other.unary(val, db),
            (false, false) => {
                let idx = push([self.idx, other.idx], [da, db]);
                Var { val, idx, _tape: PhantomData }
            }
        }
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_constant() {
            write!(f, "Var({})", self.val)
        } else {
            write!(f, "Var({} @{})", self.val, self.idx)
        }
    }
}

impl PartialEq for Var {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl PartialOrd for Var {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        self.val.partial_cmp(&other.val)
    }
}

impl Add for Var {
    type Output = Var;
    fn add(self, rhs: Var) -> Var {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var {
    type Output = Var;
    fn sub(self, rhs: Var) -> Var {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var {
    type Output = Var;
    fn mul(self, rhs: Var) -> Var {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var {
    type Output = Var;
    fn div(self, rhs: Var) -> Var {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Rem for Var {
    type Output = Var;
    fn rem(self, rhs: Var) -> Var {
        let t = (self.val / rhs.val).trunc();
        self.binary(rhs, self.val % rhs.val, 1.0, -t)
    }
}

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        self.unary(-self.val, -1.0)
    }
}

impl AddAssign for Var {
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var {
    fn sub_assign(&mut self, rhs: Var) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var {
    fn mul_assign(&mut self, rhs: Var) {
        *self = *self * rhs;
    }
}

impl Zero for Var {
    fn zero() -> Self {
        Var::constant(0.0)
    }
    fn is_zero(&self) -> bool {
        self.val == 0.0
    }
}

impl One for Var {
    fn one() -> Self {
        Var::constant(1.0)
    }
}

impl Num for Var {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Var::constant)
    }
}

impl Scalar for Var {
    fn from_f64(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn abs(self) -> Self {
        // Subgradient 0 at the kink.
        let d = if self.val > 0.0 {
            1.0
        } else if self.val < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(self.val.abs(), d)
    }
}

/// Runs `f` against an empty tape and restores the previous tape after.
pub fn with_fresh_tape<R>(f: impl FnOnce() -> R) -> R {
    let saved = TAPE.with(|t| std::mem::take(&mut *t.borrow_mut()));
    let out = f();
    TAPE.with(|t| *t.borrow_mut() = saved);
    out
}

/// Reverse sweep from `output`; returns the adjoint of each requested leaf.
pub fn adjoints(output: Var, leaves: &[Var]) -> Vec<f64> {
    if output.is_constant() {
        return vec![0.0; leaves.len()];
    }
    let adj = TAPE.with(|t| {
        let tape = t.borrow();
        let mut adj = vec![0.0; output.idx as usize + 1];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = &tape[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != CONST {
                    adj[p as usize] += a * node.partials[k];
                }
            }
        }
        adj
    });
    leaves
        .iter()
        .map(|l| {
            if l.is_constant() {
                0.0
            } else {
                adj.get(l.idx as usize).copied().unwrap_or(0.0)
            }
        })
        .collect()
}

/// Number of nodes currently recorded on this thread's tape.
pub fn tape_len() -> usize {
    TAPE.with(|t| t.borrow().len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad1(f: impl Fn(Var) -> Var, x: f64) -> f64 {
        with_fresh_tape(|| {
            let v = Var::leaf(x);
            adjoints(f(v), &[v])[0]
        })
    }

    #[test]
    fn elementary_derivatives() {
        assert!((grad1(|x| x * x, 3.0) - 6.0).abs() < 1e-15);
        assert!((grad1(|x| x.exp(), 0.5) - 0.5f64.exp()).abs() < 1e-15);
        assert!((grad1(|x| x.ln(), 2.0) - 0.5).abs() < 1e-15);
        assert!((grad1(|x| x.tanh(), 0.3) - (1.0 - 0.3f64.tanh().powi(2))).abs() < 1e-15);
        assert!((grad1(|x| Var::one() / x, 2.0) + 0.25).abs() < 1e-15);
        assert!((grad1(|x| x.sqrt(), 4.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reused_variable_accumulates() {
        // f = x*y + x, df/dx = y + 1, df/dy = x
        let g = with_fresh_tape(|| {
            let x = Var::leaf(2.0);
            let y = Var::leaf(5.0);
            adjoints(x * y + x, &[x, y])
        });
        assert_eq!(g, vec![6.0, 2.0]);
    }

    #[test]
    fn constants_stay_off_tape() {
        with_fresh_tape(|| {
            let c = Var::from_f64(3.0) * Var::from_f64(2.0);
            assert!(c.is_constant());
            assert_eq!(tape_len(), 0);
            assert_eq!(adjoints(c, &[]), Vec::<f64>::new());
        });
    }

    #[test]
    fn fresh_tape_restores_outer_tape() {
        with_fresh_tape(|| {
            let _x = Var::leaf(1.0);
            assert_eq!(tape_len(), 1);
            with_fresh_tape(|| assert_eq!(tape_len(), 0));
            assert_eq!(tape_len(), 1);
        });
    }
}
