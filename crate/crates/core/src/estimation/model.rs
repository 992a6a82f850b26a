//! The regression model behind the estimation experiments.
//!
//! For an input `X ∈ R^d` the regression function is a softmax-gated
//! mixture of `N` known experts and `ℓ` prompt experts:
//!
//! ```text
//! score_k  = Xᵀ A0_k X + a0_k                   expert_k  = η0_k X
//! score_j  = (B W2 σ(W1_j X))ᵀ X + b_j          expert_j  = C W2 σ(W1_j X)
//! f_G(X)   = Σ softmax(score)·expert
//! ```
//!
//! With `σ = identity` this is the linear setting, where only the products
//! `W2·W1_j` are identifiable.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::prompts::Activation;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

/// A mixing measure `Σ exp(b_j) δ_(W1_j, W2)`: one log-weight and one `r×d`
/// inner matrix per atom, with a single `d×r` outer matrix shared by all.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMeasure {
    log_weights: Vec<f64>,
    w1: Vec<Tensor<f64>>,
    w2: Tensor<f64>,
}

impl MixingMeasure {
    pub fn new(log_weights: Vec<f64>, w1: Vec<Tensor<f64>>, w2: Tensor<f64>) -> Result<Self> {
        if log_weights.len() != w1.len() {
            return shape_err(format!("{} log-weights for {} atoms", log_weights.len(), w1.len()));
        }
        if w2.shape().len() != 2 {
            return shape_err(format!("W2 must be a matrix, got shape {:?}", w2.shape()));
        }
        let (d, r) = (w2.rows(), w2.cols());
        for (j, m) in w1.iter().enumerate() {
            if m.shape() != [r, d] {
                return shape_err(format!("W1 of atom {j} has shape {:?}, expected [{r}, {d}]", m.shape()));
            }
        }
        if let Some(b) = log_weights.iter().find(|b| !b.is_finite()) {
            return Err(Error::Domain(format!("non-finite log-weight {b}")));
        }
        Ok(MixingMeasure { log_weights, w1, w2 })
    }

    pub fn atoms(&self) -> usize {
        self.log_weights.len()
    }

    pub fn dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn rank(&self) -> usize {
        self.w2.cols()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.log_weights[j].exp()
    }

    pub fn w1(&self, j: usize) -> &Tensor<f64> {
        &self.w1[j]
    }

    pub fn w2(&self) -> &Tensor<f64> {
        &self.w2
    }

    /// `W2·W1_j`, the `d×d` matrix that the linear setting identifies.
    pub fn product(&self, j: usize) -> Tensor<f64> {
        self.w2.matmul(&self.w1[j]).expect("shapes checked at construction")
    }

    /// Number of scalars in the flat form.
    pub fn flat_len(atoms: usize, d: usize, r: usize) -> usize {
        atoms * (1 + r * d) + d * r
    }

    /// Flat order: all log-weights, then each `W1_j` row-major, then `W2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.log_weights.clone();
        for m in &self.w1 {
            out.extend_from_slice(m.data());
        }
        out.extend_from_slice(self.w2.data());
        out
    }

    pub fn from_flat(atoms: usize, d: usize, r: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::flat_len(atoms, d, r) {
            return shape_err(format!(
                "flat measure has {} values, {atoms} atoms with d={d}, r={r} need {}",
                flat.len(),
                Self::flat_len(atoms, d, r)
            ));
        }
        let (b, rest) = flat.split_at(atoms);
        let (w1, w2) = rest.split_at(atoms * r * d);
        let w1 = w1
            .chunks_exact(r * d)
            .map(|c| Tensor::from_f64(vec![r, d], c))
            .collect::<Result<Vec<_>>>()?;
        Self::new(b.to_vec(), w1, Tensor::from_f64(vec![d, r], w2)?)
    }

    /// Splits atom `j` into `copies` atoms with the same matrices and
    /// `exp(b)/copies` weight each. The represented measure is unchanged.
    pub fn split_atom(&self, j: usize, copies: usize) -> Result<Self> {
        if j >= self.atoms() {
            return Err(Error::Index { what: "atom", index: j, len: self.atoms() });
        }
        if copies == 0 {
            return Err(Error::Config("cannot split an atom into zero copies".into()));
        }
        let mut b = self.log_weights.clone();
        let mut w1 = self.w1.clone();
        let shifted = b[j] - (copies as f64).ln();
        b[j] = shifted;
        for _ in 1..copies {
            b.push(shifted);
            w1.push(self.w1[j].clone());
        }
        Self::new(b, w1, self.w2.clone())
    }

    /// Adds independent `N(0, std²)` noise to every scalar.
    pub fn perturbed(&self, std: f64, rng: &mut Rng) -> Self {
        let flat: Vec<f64> = self.to_flat().into_iter().map(|v| v + std * rng.normal()).collect();
        Self::from_flat(self.atoms(), self.dim(), self.rank(), &flat).expect("same shape")
    }

    /// Clamps every scalar into `[-bound, bound]`.
    pub fn clamped(&self, bound: f64) -> Self {
        let flat: Vec<f64> = self.to_flat().into_iter().map(|v| v.clamp(-bound, bound)).collect();
        Self::from_flat(self.atoms(), self.dim(), self.rank(), &flat).expect("same shape")
    }
}

/// Known pre-trained experts: `(A0_k, a0_k, η0_k)` for `k < N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedExpertSpec {
    pub a0_mat: Vec<Tensor<f64>>,
    pub a0_bias: Vec<f64>,
    pub eta0: Vec<Tensor<f64>>,
}

impl PretrainedExpertSpec {
    pub fn new(a0_mat: Vec<Tensor<f64>>, a0_bias: Vec<f64>, eta0: Vec<Tensor<f64>>) -> Result<Self> {
        if a0_mat.len() != a0_bias.len() || a0_mat.len() != eta0.len() {
            return shape_err(format!(
                "pre-trained spec lengths differ: {} A0, {} a0, {} η0",
                a0_mat.len(),
                a0_bias.len(),
                eta0.len()
            ));
        }
        Ok(PretrainedExpertSpec { a0_mat, a0_bias, eta0 })
    }

    pub fn empty() -> Self {
        PretrainedExpertSpec { a0_mat: vec![], a0_bias: vec![], eta0: vec![] }
    }

    pub fn len(&self) -> usize {
        self.a0_bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a0_bias.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputDistribution {
    /// Independent coordinates uniform on `[low, high)`.
    Uniform { low: f64, high: f64 },
}

impl Default for InputDistribution {
    fn default() -> Self {
        InputDistribution::Uniform { low: -1.0, high: 1.0 }
    }
}

impl InputDistribution {
    pub fn sample(&self, d: usize, rng: &mut Rng) -> Vec<f64> {
        match *self {
            InputDistribution::Uniform { low, high } => rng.uniform_vec(d, low, high),
        }
    }
}

/// Shapes and noise of a regression experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    /// Input dimension `d`.
    pub dim: usize,
    /// Output dimension `d'`.
    pub out_dim: usize,
    pub rank: usize,
    /// Number of known pre-trained experts `N`.
    pub pretrained_experts: usize,
    /// Number of true prompt experts `L`.
    pub true_experts: usize,
    /// Number of fitted atoms `L'`.
    pub fitted_experts: usize,
    /// Sample size `n`.
    pub samples: usize,
    pub noise_std: f64,
    pub activation: Activation,
    /// `d×d`; identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b_matrix: Option<Vec<Vec<f64>>>,
    /// `d'×d`; identity when absent (requires `d' = d`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_matrix: Option<Vec<Vec<f64>>>,
    pub input: InputDistribution,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            dim: 2,
            out_dim: 2,
            rank: 1,
            pretrained_experts: 1,
            true_experts: 2,
            fitted_experts: 2,
            samples: 1000,
            noise_std: 0.1,
            activation: Activation::Tanh,
            b_matrix: None,
            c_matrix: None,
            input: InputDistribution::default(),
        }
    }
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>], shape: [usize; 2]) -> Result<Tensor<f64>> {
    if rows.len() != shape[0] || rows.iter().any(|r| r.len() != shape[1]) {
        return Err(Error::Config(format!("{name} must be {}×{}", shape[0], shape[1])));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::from_f64(shape.to_vec(), &flat).map_err(|e| Error::Config(format!("{name}: {e}")))
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.out_dim == 0 || self.rank == 0 {
            return bad("dim, out_dim and rank must be positive".into());
        }
        if self.true_experts == 0 {
            return bad("true_experts must be at least 1".into());
        }
        if self.fitted_experts < self.true_experts {
            return bad(format!(
                "fitted_experts ({}) must be at least true_experts ({})",
                self.fitted_experts, self.true_experts
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.c_matrix.is_none() && self.out_dim != self.dim {
            return bad(format!("c_matrix is required when out_dim ({}) != dim ({})", self.out_dim, self.dim));
        }
        let InputDistribution::Uniform { low, high } = self.input;
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return bad(format!("input range [{low}, {high}) is empty or infinite"));
        }
        self.b_tensor()?;
        self.c_tensor()?;
        Ok(())
    }

    pub fn b_tensor(&self) -> Result<Tensor<f64>> {
        match &self.b_matrix {
            Some(rows) => matrix_from_rows("b_matrix", rows, [self.dim, self.dim]),
            None => Ok(Tensor::identity(self.dim)),
        }
    }

    pub fn c_tensor(&self) -> Result<Tensor<f64>> {
        match &self.c_matrix {
            Some(rows) => matrix_from_rows("c_matrix", rows, [self.out_dim, self.dim]),
            None => Ok(Tensor::identity(self.dim)),
        }
    }
}

/// Everything needed to evaluate `f_G` apart from the measure `G` itself.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    pub dim: usize,
    pub out_dim: usize,
    pub rank: usize,
    pub activation: Activation,
    pub pretrained: PretrainedExpertSpec,
    pub b: Tensor<f64>,
    pub c: Tensor<f64>,
}

impl RegressionModel {
    pub fn new(cfg: &RegressionConfig, pretrained: PretrainedExpertSpec) -> Result<Self> {
        cfg.validate()?;
        if pretrained.len() != cfg.pretrained_experts {
            return shape_err(format!(
                "config declares {} pre-trained experts, spec has {}",
                cfg.pretrained_experts,
                pretrained.len()
            ));
        }
        for k in 0..pretrained.len() {
            if pretrained.a0_mat[k].shape() != [cfg.dim, cfg.dim] {
                return shape_err(format!("A0_{k} must be {}×{}", cfg.dim, cfg.dim));
            }
            if pretrained.eta0[k].shape() != [cfg.out_dim, cfg.dim] {
                return shape_err(format!("η0_{k} must be {}×{}", cfg.out_dim, cfg.dim));
            }
        }
        Ok(RegressionModel {
            dim: cfg.dim,
            out_dim: cfg.out_dim,
            rank: cfg.rank,
            activation: cfg.activation,
            pretrained,
            b: cfg.b_tensor()?,
            c: cfg.c_tensor()?,
        })
    }

    pub fn check_measure(&self, g: &MixingMeasure) -> Result<()> {
        if g.dim() != self.dim || g.rank() != self.rank {
            return shape_err(format!(
                "measure has d={}, r={}; model expects d={}, r={}",
                g.dim(),
                g.rank(),
                self.dim,
                self.rank
            ));
        }
        Ok(())
    }

    fn pretrained_parts<S: Scalar>(&self, x: &[f64]) -> (Vec<S>, Vec<Vec<S>>) {
        let mut scores = Vec::with_capacity(self.pretrained.len());
        let mut experts = Vec::with_capacity(self.pretrained.len());
        for k in 0..self.pretrained.len() {
            let ax = self.pretrained.a0_mat[k].matvec(x).expect("validated shape");
            let q: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
            scores.push(S::from_f64(q + self.pretrained.a0_bias[k]));
            let e = self.pretrained.eta0[k].matvec(x).expect("validated shape");
            experts.push(e.into_iter().map(S::from_f64).collect());
        }
        (scores, experts)
    }

    /// Gate weights and expert outputs of every component at `x`, known
    /// experts first. `flat` is a measure with `atoms` atoms in flat order.
    pub fn components<S: Scalar>(&self, atoms: usize, flat: &[S], x: &[f64]) -> Result<(Vec<S>, Vec<Vec<S>>)> {
        let (d, r) = (self.dim, self.rank);
        if x.len() != d {
            return shape_err(format!("input has length {}, expected {d}", x.len()));
        }
        if flat.len() != MixingMeasure::flat_len(atoms, d, r) {
            return shape_err(format!("flat measure has {} values", flat.len()));
        }
        let (mut scores, mut experts) = self.pretrained_parts::<S>(x);
        let btx = self.b.transpose()?.matvec(x)?;
        let w2 = &flat[atoms + atoms * r * d..];
        for j in 0..atoms {
            let w1 = &flat[atoms + j * r * d..atoms + (j + 1) * r * d];
            let hidden: Vec<S> = (0..r)
                .map(|a| {
                    let u = (0..d).fold(S::zero(), |acc, c| acc + w1[a * d + c] * S::from_f64(x[c]));
                    self.activation.apply(u)
                })
                .collect();
            let p: Vec<S> = (0..d)
                .map(|c| (0..r).fold(S::zero(), |acc, a| acc + w2[c * r + a] * hidden[a]))
                .collect();
            let s = p.iter().zip(&btx).fold(flat[j], |acc, (&pc, &bc)| acc + pc * S::from_f64(bc));
            scores.push(s);
            let e: Vec<S> = (0..self.out_dim)
                .map(|o| (0..d).fold(S::zero(), |acc, c| acc + S::from_f64(self.c.at2(o, c)) * p[c]))
                .collect();
            experts.push(e);
        }
        Ok((softmax_slice(&scores), experts))
    }

    /// `f_G(x)` for a flat measure, generic over the scalar.
    pub fn predict_flat<S: Scalar>(&self, atoms: usize, flat: &[S], x: &[f64]) -> Result<Vec<S>> {
        let (gates, experts) = self.components(atoms, flat, x)?;
        let mut out = vec![S::zero(); self.out_dim];
        for (g, e) in gates.iter().zip(&experts) {
            for (o, v) in out.iter_mut().zip(e) {
                *o += *g * *v;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, g: &MixingMeasure, x: &[f64]) -> Result<Vec<f64>> {
        self.check_measure(g)?;
        self.predict_flat(g.atoms(), &g.to_flat(), x)
    }

    /// The prompt function `W2·σ(W1_j x)` of atom `j`.
    pub fn prompt(&self, g: &MixingMeasure, j: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_measure(g)?;
        if j >= g.atoms() {
            return Err(Error::Index { what: "atom", index: j, len: g.atoms() });
        }
        let h: Vec<f64> = g.w1(j).matvec(x)?.into_iter().map(|u| self.activation.apply(u)).collect();
        g.w2().matvec(&h)
    }
}

/// `f_G(x)` for measure `G` under the given pre-trained experts and config.
pub fn eval_true_regression(
    x: &[f64],
    g: &MixingMeasure,
    pre: &PretrainedExpertSpec,
    cfg: &RegressionConfig,
) -> Result<Vec<f64>> {
    RegressionModel::new(cfg, pre.clone())?.predict(g, x)
}

/// Inputs and responses, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub out_dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn response(&self, i: usize) -> &[f64] {
        &self.y[i * self.out_dim..(i + 1) * self.out_dim]
    }
}

/// Draws `n` pairs `Y = f_{G*}(X) + ε`, `X ~ μ`, `ε ~ N(0, ν² I)`.
pub fn sample_dataset(
    truth: &MixingMeasure,
    model: &RegressionModel,
    input: &InputDistribution,
    n: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    model.check_measure(truth)?;
    let flat = truth.to_flat();
    let mut x = Vec::with_capacity(n * model.dim);
    let mut y = Vec::with_capacity(n * model.out_dim);
    for _ in 0..n {
        let xi = input.sample(model.dim, rng);
        let f = model.predict_flat(truth.atoms(), &flat, &xi)?;
        for v in f {
            y.push(v + noise_std * rng.normal());
        }
        x.extend_from_slice(&xi);
    }
    Ok(Dataset { dim: model.dim, out_dim: model.out_dim, x, y })
}
