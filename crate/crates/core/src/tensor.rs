//! Dense row-major tensors and the handful of kernels the rest of the
//! crate is built on: matrix product, row softmax, layer normalization and
//! the channel-shared 2D convolution.
//!
//! Feature maps of shape `H×W×d` are stored with the row index outermost,
//! so flattening to `(H·W)×d` is a no-op on the data buffer.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn ensure_finite<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Domain(format!(
            "{op}: non-finite value {:?} at flat index {i}",
            data[i].value()
        ))),
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        ensure_finite(&data, "Tensor::new")?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); len] }
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect())
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => shape_err(format!("{op}: expected a matrix, got shape {:?}", self.shape)),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Row `i` of a matrix as a slice.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return shape_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Converts element type through `f64`, dropping derivative tracking.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.value())).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("{op}: {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut data = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                data.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor { shape: vec![c, r], data })
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Self> {
        let (r, k) = self.dims2("matmul")?;
        let (k2, c) = other.dims2("matmul")?;
        if k != k2 {
            return shape_err(format!(
                "matmul: inner dimensions differ ({r}x{k} · {k2}x{c})"
            ));
        }
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            let out = &mut data[i * c..(i + 1) * c];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * c..(p + 1) * c];
                for (o, &b) in out.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![r, c], data)
    }

    /// Matrix-vector product for a matrix `self` and vector `v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        let (r, c) = self.dims2("matvec")?;
        if v.len() != c {
            return shape_err(format!("matvec: {r}x{c} · vector of length {}", v.len()));
        }
        Ok((0..r).map(|i| crate::scalar::dot(&self.data[i * c..(i + 1) * c], v)).collect())
    }

    /// Stacks two matrices with equal column counts vertically.
    pub fn vstack(&self, other: &Tensor<T>) -> Result<Self> {
        let (r1, c1) = self.dims2("vstack")?;
        let (r2, c2) = other.dims2("vstack")?;
        if c1 != c2 {
            return shape_err(format!("vstack: column counts {c1} and {c2}"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Tensor { shape: vec![r1 + r2, c1], data })
    }

    /// Columns `start..end` of a matrix.
    pub fn col_slice(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2("col_slice")?;
        if start > end || end > c {
            return shape_err(format!("col_slice {start}..{end} of {c} columns"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Tensor { shape: vec![r, w], data })
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!(
                "max_abs_diff: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.value() - b.value()).abs())
            .fold(0.0, f64::max))
    }

    pub fn frobenius_norm(&self) -> T {
        crate::scalar::dot(&self.data, &self.data).sqrt()
    }
}

/// Numerically stable softmax of one slice, shifted by its maximum.
pub fn softmax_slice<S: Scalar>(scores: &[S]) -> Vec<S> {
    if scores.is_empty() {
        return Vec::new();
    }
    let m = scores.iter().skip(1).fold(scores[0], |m, &s| m.max_by_value(s));
    // The shift is a constant for differentiation purposes; softmax is
    // invariant to it, so detaching it loses nothing.
    let shift = S::from_f64(m.value());
    let exps: Vec<S> = scores.iter().map(|&s| (s - shift).exp()).collect();
    let total = crate::scalar::sum(exps.iter().copied());
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax applied independently to each row of a matrix.
pub fn softmax_rows<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = m.dims2("softmax_rows")?;
    ensure_finite(m.data(), "softmax_rows")?;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(softmax_slice(m.row(i)));
    }
    Tensor::new(vec![r, c], data)
}

/// 2D convolution (stride 1, no padding) of an `H×W×d` feature map with a
/// single `K×K` kernel shared by all `d` channels.
pub fn channelwise_conv2d<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w, d) = match x.shape()[..] {
        [h, w, d] => (h, w, d),
        _ => return shape_err(format!("conv input must be H×W×d, got {:?}", x.shape())),
    };
    let k = match kernel.shape()[..] {
        [a, b] if a == b => a,
        _ => return shape_err(format!("kernel must be K×K, got {:?}", kernel.shape())),
    };
    if k == 0 || k > h || k > w {
        return shape_err(format!("kernel size {k} does not fit a {h}×{w} map"));
    }
    let (ho, wo) = (h - k + 1, w - k + 1);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![S::zero(); ho * wo * d];
    for i in 0..ho {
        for j in 0..wo {
            let o = &mut out[(i * wo + j) * d..(i * wo + j + 1) * d];
            for a in 0..k {
                for b in 0..k {
                    let wgt = kd[a * k + b];
                    let base = ((i + a) * w + (j + b)) * d;
                    for (oc, &xc) in o.iter_mut().zip(&xd[base..base + d]) {
                        *oc += wgt * xc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, d], out)
}

/// Layer normalization of a single vector with affine gain and bias.
pub fn layer_norm<S: Scalar>(
    v: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let out = layer_norm_slice(v.data(), gain.data(), bias.data(), eps)?;
    Tensor::new(vec![out.len()], out)
}

pub(crate) fn layer_norm_slice<S: Scalar>(
    v: &[S],
    gain: &[S],
    bias: &[S],
    eps: f64,
) -> Result<Vec<S>> {
    let d = v.len();
    if d == 0 || gain.len() != d || bias.len() != d {
        return shape_err(format!(
            "layer_norm: input {d}, gain {}, bias {}",
            gain.len(),
            bias.len()
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = S::from_usize(d);
    let mean = crate::scalar::sum(v.iter().copied()) / n;
    let var = crate::scalar::sum(v.iter().map(|&x| (x - mean) * (x - mean))) / n;
    let inv = S::one() / (var + S::from_f64(eps)).sqrt();
    let out: Vec<S> = v
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&x, (&g, &b))| g * (x - mean) * inv + b)
        .collect();
    ensure_finite(&out, "layer_norm")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_length_and_nan() {
        assert!(matches!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::<f64>::new(vec![1], vec![f64::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        for c in [-40.0, 0.0, 7.5] {
            let s = softmax_rows(&t(&[1, 3], &[c, c, c])).unwrap();
            for &p in s.data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }

        // exp(x_i)/Σexp evaluated directly.
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expected = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let s = softmax_rows(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        for (a, b) in s.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = Tensor { shape: vec![1, 2], data: vec![0.0, f64::INFINITY] };
        assert!(matches!(softmax_rows(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn conv_examples() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(channelwise_conv2d(&x, &k).unwrap().data(), &[10.0]);

        let mut rng = Rng::new(3);
        let x = rng.uniform_tensor(vec![3, 4, 2], -1.0, 1.0);
        let id = t(&[1, 1], &[1.0]);
        assert_eq!(channelwise_conv2d(&x, &id).unwrap(), x);

        let z = Tensor::<f64>::zeros(vec![4, 4, 3]);
        let k = rng.uniform_tensor(vec![3, 3], -1.0, 1.0);
        let out = channelwise_conv2d(&z, &k).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shares_kernel_across_channels() {
        // Channel c of the output only sees channel c of the input.
        let x = t(&[2, 2, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
        let k = t(&[2, 2], &[1.0, 0.5, 0.25, 2.0]);
        let out = channelwise_conv2d(&x, &k).unwrap();
        let c0 = 1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 2.0 * 4.0;
        assert_eq!(out.data(), &[c0, 10.0 * c0]);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 1]);
        let k = Tensor::<f64>::zeros(vec![3, 3]);
        assert!(matches!(channelwise_conv2d(&x, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[3], &[1.0; 3]);
        let zeros = t(&[3], &[0.0; 3]);
        let c = t(&[3], &[4.2; 3]);
        let out = layer_norm(&c, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let v = t(&[2], &[-1.0, 1.0]);
        let out = layer_norm(&v, &t(&[2], &[1.0; 2]), &t(&[2], &[0.0; 2]), 1e-14).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-12);
        assert!((out.data()[1] - 1.0).abs() < 1e-12);

        // mean 2, population variance 2/3.
        let inv = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        let out = layer_norm(&t(&[3], &[1.0, 2.0, 3.0]), &ones, &zeros, 1e-5).unwrap();
        for (a, b) in out.data().iter().zip([-inv, 0.0, inv]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn matmul_and_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = a.transpose().unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[14.0, 32.0, 32.0, 77.0]);
        assert!(a.matmul(&a).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let m = t(&[3, 4], &vals);
            let s = softmax_rows(&m).unwrap();
            for i in 0..3 {
                let row = s.row(i);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-20.0f64..20.0, 5), c in -30.0f64..30.0) {
            let a = softmax_rows(&t(&[1, 5], &vals)).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let b = softmax_rows(&t(&[1, 5], &shifted)).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let x = rng.uniform_tensor(vec![5, 4, 3], -1.0, 1.0);
            let y = rng.uniform_tensor(vec![5, 4, 3], -1.0, 1.0);
            let k = rng.uniform_tensor(vec![2, 2], -1.0, 1.0);
            let lhs = channelwise_conv2d(&x.scale(a).unwrap().add(&y.scale(b).unwrap()).unwrap(), &k).unwrap();
            let rhs = channelwise_conv2d(&x, &k).unwrap().scale(a).unwrap()
                .add(&channelwise_conv2d(&y, &k).unwrap().scale(b).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
        }

        #[test]
        fn layer_norm_shift_invariant(vals in proptest::collection::vec(-5.0f64..5.0, 6), c in -10.0f64..10.0) {
            let ones = t(&[6], &[1.0; 6]);
            let zeros = t(&[6], &[0.0; 6]);
            let a = layer_norm(&t(&[6], &vals), &ones, &zeros, LAYER_NORM_EPS).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + c).collect();
            let b = layer_norm(&t(&[6], &shifted), &ones, &zeros, LAYER_NORM_EPS).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }

        #[test]
        fn layer_norm_standardizes(vals in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 0.5);
            let out = layer_norm(&t(&[8], &vals), &t(&[8], &[1.0; 8]), &t(&[8], &[0.0; 8]), LAYER_NORM_EPS).unwrap();
            let mean = out.data().iter().sum::<f64>() / 8.0;
            let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
