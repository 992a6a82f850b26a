//! Gradients of scalar objectives over a flat parameter vector.
//!
//! [`grad`] runs the objective once on tape variables and sweeps backwards;
//! [`finite_diff_grad`] is the independent central-difference oracle and
//! [`grad_check`] compares the two. The check evaluates the objective in
//! double-double precision ([`crate::dd::Dd`]): in plain f64 the difference
//! `f(p+h) - f(p-h)` carries about `1e-16·|f|/h` of rounding noise, which
//! exceeds the relative bound on small gradient components.

use serde::{Deserialize, Serialize};

use crate::autodiff::{adjoints, with_fresh_tape, Var};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default central-difference step for doubles.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Floor of the denominator in [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Named, shaped slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry directly after the previous one.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> &mut Self {
        let offset = self.total_len();
        self.entries.push(LayoutEntry { name: name.into(), shape, offset });
        self
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }
}

/// Flat vector of every trainable scalar plus the map back to structure.
/// Frozen quantities never appear here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: ParamLayout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total_len()
            )));
        }
        Ok(ParamVector { values, layout })
    }

    /// Unstructured vector with a single entry named `params`.
    pub fn flat(values: Vec<f64>) -> Self {
        let mut layout = ParamLayout::new();
        layout.push("params", vec![values.len()]);
        ParamVector { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of the named entry.
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.range()])
    }

    /// Splits into one owned vector per layout entry.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), self.values[e.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(parts: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut layout = ParamLayout::new();
        let mut values = Vec::new();
        for (name, shape, vals) in parts {
            if shape.iter().product::<usize>() != vals.len() {
                return Err(Error::Shape(format!("entry {name}: shape {shape:?} vs {} values", vals.len())));
            }
            layout.push(name.clone(), shape.clone());
            values.extend_from_slice(vals);
        }
        Ok(ParamVector { values, layout })
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        ParamVector { values, layout: self.layout.clone() }
    }
}

/// A scalar function of a flat parameter vector, written once for every
/// [`Scalar`] so it can be evaluated plainly or on the tape.
pub trait Objective {
    fn eval<S: Scalar>(&self, params: &[S]) -> Result<S>;
}

/// `a·f + b·g` for two objectives over the same parameters.
pub struct LinearCombination<'a, F, G> {
    pub a: f64,
    pub f: &'a F,
    pub b: f64,
    pub g: &'a G,
}

impl<F: Objective, G: Objective> Objective for LinearCombination<'_, F, G> {
    fn eval<S: Scalar>(&self, params: &[S]) -> Result<S> {
        Ok(S::from_f64(self.a) * self.f.eval(params)? + S::from_f64(self.b) * self.g.eval(params)?)
    }
}

/// Plain double-precision evaluation.
pub fn value<O: Objective>(obj: &O, p: &ParamVector) -> Result<f64> {
    let v = obj.eval::<f64>(p.values())?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("objective is not finite ({v})")));
    }
    Ok(v)
}

/// Exact gradient by reverse-mode accumulation.
pub fn grad<O: Objective>(obj: &O, p: &ParamVector) -> Result<ParamVector> {
    let g = with_fresh_tape(|| -> Result<Vec<f64>> {
        let leaves: Vec<Var> = p.values().iter().map(|&v| Var::leaf(v)).collect();
        let out = obj.eval(&leaves)?;
        if !out.is_finite() {
            return Err(Error::Domain(format!("objective is not finite ({})", out.value())));
        }
        Ok(adjoints(out, &leaves))
    })?;
    Ok(p.with_values(g))
}

/// Central differences `(f(p+h·e_i) - f(p-h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<O: Objective>(obj: &O, p: &ParamVector, h: f64) -> Result<ParamVector> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work = p.values().to_vec();
    let mut g = Vec::with_capacity(work.len());
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = obj.eval::<f64>(&work)?;
        work[i] = orig - h;
        let fm = obj.eval::<f64>(&work)?;
        work[i] = orig;
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(p.with_values(g))
}

/// Central differences with the loss evaluated in double-double precision.
/// The perturbed points `p ± h·e_i` are exact, so the only error left is the
/// `O(h²)` truncation term.
pub fn finite_diff_grad_extended<O: Objective>(obj: &O, p: &ParamVector, h: f64) -> Result<ParamVector> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Dd> = p.values().iter().map(|&v| Dd::from(v)).collect();
    let step = Dd::from(h);
    let mut g = Vec::with_capacity(work.len());
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let fp = obj.eval::<Dd>(&work)?;
        work[i] = orig - step;
        let fm = obj.eval::<Dd>(&work)?;
        work[i] = orig;
        g.push(f64::from((fp - fm) / (step + step)));
    }
    Ok(p.with_values(g))
}

/// `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest elementwise relative error between the tape gradient and the
/// double-double finite-difference oracle.
pub fn grad_check<O: Objective>(obj: &O, p: &ParamVector, h: f64) -> Result<f64> {
    let exact = grad(obj, p)?;
    let approx = finite_diff_grad_extended(obj, p, h)?;
    Ok(exact
        .values()
        .iter()
        .zip(approx.values())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    struct HalfSquaredNorm;
    impl Objective for HalfSquaredNorm {
        fn eval<S: Scalar>(&self, p: &[S]) -> Result<S> {
            Ok(crate::scalar::dot(p, p) * S::from_f64(0.5))
        }
    }

    struct Constant(f64);
    impl Objective for Constant {
        fn eval<S: Scalar>(&self, _p: &[S]) -> Result<S> {
            Ok(S::from_f64(self.0))
        }
    }

    struct Power(u32);
    impl Objective for Power {
        fn eval<S: Scalar>(&self, p: &[S]) -> Result<S> {
            Ok(p[0].powi(self.0))
        }
    }

    /// Something with tanh, exp and coupling between coordinates.
    struct Wiggly;
    impl Objective for Wiggly {
        fn eval<S: Scalar>(&self, p: &[S]) -> Result<S> {
            let a = (p[0] * p[1]).tanh();
            let b = (p[2] - p[0]).exp();
            Ok(a * b + p[1] * p[1] * p[2])
        }
    }

    struct Blowup;
    impl Objective for Blowup {
        fn eval<S: Scalar>(&self, p: &[S]) -> Result<S> {
            Ok(p[0] / S::zero())
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let p = ParamVector::flat(vec![1.5, -2.0, 0.25]);
        assert_eq!(grad(&HalfSquaredNorm, &p).unwrap().values(), p.values());
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = ParamVector::flat(vec![1.0, 2.0]);
        assert_eq!(grad(&Constant(3.0), &p).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_differences_on_polynomials() {
        let g = finite_diff_grad(&Power(2), &ParamVector::flat(vec![3.0]), 1e-5).unwrap();
        assert!((g.values()[0] - 6.0).abs() < 1e-9);
        // Central difference of x^3 at 1 is exactly 3 + h^2.
        let h = 1e-3;
        let g = finite_diff_grad(&Power(3), &ParamVector::flat(vec![1.0]), h).unwrap();
        assert!((g.values()[0] - (3.0 + h * h)).abs() < 1e-9);
        // In double-double the same identity holds to the last f64 bit.
        let h = 1e-5;
        let g = finite_diff_grad_extended(&Power(3), &ParamVector::flat(vec![1.0]), h).unwrap();
        assert!((g.values()[0] - (3.0 + h * h)).abs() < 1e-15);
        let plain = finite_diff_grad(&Power(3), &ParamVector::flat(vec![1.0]), h).unwrap();
        assert!((plain.values()[0] - 3.0).abs() > 1e-13);
    }

    #[test]
    fn grad_check_on_smooth_function() {
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let p = ParamVector::flat(rng.uniform_vec(3, -1.0, 1.0));
            assert!(grad_check(&Wiggly, &p, DEFAULT_FD_STEP).unwrap() < 1e-7);
        }
        let p = ParamVector::flat(vec![3.0]);
        assert!(grad_check(&Power(2), &p, DEFAULT_FD_STEP).unwrap() < 1e-9);
    }

    #[test]
    fn non_finite_objective_is_a_domain_error() {
        let p = ParamVector::flat(vec![1.0]);
        assert!(matches!(grad(&Blowup, &p), Err(Error::Domain(_))));
        assert!(matches!(finite_diff_grad(&Power(2), &p, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn layout_lookup() {
        let mut layout = ParamLayout::new();
        layout.push("a", vec![2, 2]).push("b", vec![3]);
        let pv = ParamVector::new((0..7).map(f64::from).collect(), layout).unwrap();
        assert_eq!(pv.block("b").unwrap(), &[4.0, 5.0, 6.0]);
        assert!(ParamVector::new(vec![0.0], ParamLayout::new()).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(vals in proptest::collection::vec(-1e6f64..1e6, 1..20), split in 0usize..20) {
            let split = split.min(vals.len());
            let mut layout = ParamLayout::new();
            layout.push("head", vec![split]).push("tail", vec![vals.len() - split]);
            let pv = ParamVector::new(vals.clone(), layout).unwrap();
            let back = ParamVector::flatten(&pv.unflatten()).unwrap();
            prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.layout(), pv.layout());
        }

        #[test]
        fn gradient_is_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let p = ParamVector::flat(rng.uniform_vec(3, -1.0, 1.0));
            let combo = LinearCombination { a, f: &Wiggly, b, g: &HalfSquaredNorm };
            let lhs = grad(&combo, &p).unwrap();
            let g1 = grad(&Wiggly, &p).unwrap();
            let g2 = grad(&HalfSquaredNorm, &p).unwrap();
            for i in 0..3 {
                let rhs = a * g1.values()[i] + b * g2.values()[i];
                prop_assert!((lhs.values()[i] - rhs).abs() < 1e-10);
            }
        }
    }
}
