//! Multi-head self-attention with optional prompt tokens, and the exact
//! rewrite of each attention-output row as a softmax-gated mixture of
//! experts.
//!
//! For head `m` and output row `i`, the experts are the value projections
//! of every input token (pre-trained experts) followed by the value
//! projections of every prompt (prompt experts). Their gating scores are
//! the scaled query/key products of row `i` against the same tokens. The
//! selector matrices of the algebraic formulation are realized as plain
//! row indexing.
//!
//! Q/K/V projections carry no bias. Outputs at prompt positions are never
//! computed: queries are formed for the `N` input rows only.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::{dot, Scalar};
use crate::tensor::{softmax_rows, softmax_slice, Tensor};

/// Frozen projection matrices of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T> {
    d: usize,
    heads: usize,
    wq: Vec<Tensor<T>>,
    wk: Vec<Tensor<T>>,
    wv: Vec<Tensor<T>>,
    wo: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Per-head query/key/value maps (each `d×(d/M)`) and output map
    /// `(M·d/M)×d`.
    pub fn new(
        wq: Vec<Tensor<T>>,
        wk: Vec<Tensor<T>>,
        wv: Vec<Tensor<T>>,
        wo: Tensor<T>,
    ) -> Result<Self> {
        let heads = wq.len();
        if heads == 0 || wk.len() != heads || wv.len() != heads {
            return shape_err(format!(
                "need the same nonzero number of Q/K/V heads, got {}/{}/{}",
                wq.len(),
                wk.len(),
                wv.len()
            ));
        }
        let d = wo.shape().get(1).copied().unwrap_or(0);
        if d == 0 || d % heads != 0 {
            return shape_err(format!("model width {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        for (name, set) in [("Wq", &wq), ("Wk", &wk), ("Wv", &wv)] {
            if let Some(bad) = set.iter().find(|t| t.shape() != [d, dh]) {
                return shape_err(format!("{name} must be {d}×{dh}, got {:?}", bad.shape()));
            }
        }
        if wo.shape() != [heads * dh, d] {
            return shape_err(format!("Wo must be {}×{d}, got {:?}", heads * dh, wo.shape()));
        }
        Ok(AttentionWeights { d, heads, wq, wk, wv, wo })
    }

    /// Random frozen weights: Q and K entries uniform in `[-1, 1]` so the
    /// softmax is far from flat, V and O entries uniform in `[-1/√d, 1/√d]`.
    pub fn random(d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return shape_err(format!("model width {d} not divisible by {heads} heads"));
        }
        let dh = d / heads;
        let s = 1.0 / (d as f64).sqrt();
        let mut draw = |lo: f64, hi: f64| -> Vec<Tensor<T>> {
            (0..heads).map(|_| rng.uniform_tensor(vec![d, dh], lo, hi)).collect()
        };
        let wq = draw(-1.0, 1.0);
        let wk = draw(-1.0, 1.0);
        let wv = draw(-s, s);
        let wo = rng.uniform_tensor(vec![heads * dh, d], -s, s);
        Self::new(wq, wk, wv, wo)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn wq(&self, m: usize) -> &Tensor<T> {
        &self.wq[m]
    }

    pub fn wk(&self, m: usize) -> &Tensor<T> {
        &self.wk[m]
    }

    pub fn wv(&self, m: usize) -> &Tensor<T> {
        &self.wv[m]
    }

    pub fn wo(&self) -> &Tensor<T> {
        &self.wo
    }

    /// Same weights with a different scalar type (e.g. as tape constants).
    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        let c = |v: &Vec<Tensor<T>>| v.iter().map(Tensor::cast).collect();
        AttentionWeights {
            d: self.d,
            heads: self.heads,
            wq: c(&self.wq),
            wk: c(&self.wk),
            wv: c(&self.wv),
            wo: self.wo.cast(),
        }
    }

    fn check_tokens(&self, x: &Tensor<T>, what: &str, allow_empty: bool) -> Result<()> {
        match x.shape() {
            [n, d] if *d == self.d && (allow_empty || *n > 0) => Ok(()),
            [0] if allow_empty => Ok(()),
            s => shape_err(format!("{what} must be rows of width {}, got {s:?}", self.d)),
        }
    }
}

fn as_matrix<T: Scalar>(p: &Tensor<T>, d: usize) -> Tensor<T> {
    if p.is_empty() {
        Tensor::zeros(vec![0, d])
    } else {
        p.clone()
    }
}

/// Per-head attention outputs for the `N` input rows, before the output
/// map: one `N×(d/M)` matrix per head. Keys and values come from the
/// stacked `[X; P]`.
pub fn head_outputs<T: Scalar>(
    x: &Tensor<T>,
    prompts: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<Vec<Tensor<T>>> {
    w.check_tokens(x, "X", false)?;
    w.check_tokens(prompts, "P", true)?;
    let stacked = x.vstack(&as_matrix(prompts, w.d))?;
    let scale = T::one() / T::from_usize(w.head_dim()).sqrt();
    (0..w.heads)
        .map(|m| {
            let q = x.matmul(&w.wq[m])?;
            let k = stacked.matmul(&w.wk[m])?;
            let v = stacked.matmul(&w.wv[m])?;
            let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
            softmax_rows(&scores)?.matmul(&v)
        })
        .collect()
}

/// Multi-head self-attention over prompt-augmented input; returns only the
/// `N` rows belonging to the input tokens.
pub fn prompted_msa_forward<T: Scalar>(
    x: &Tensor<T>,
    prompts: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let heads = head_outputs(x, prompts, w)?;
    let n = x.rows();
    let dh = w.head_dim();
    let mut concat = Vec::with_capacity(n * w.d);
    for i in 0..n {
        for h in &heads {
            concat.extend_from_slice(&h.data()[i * dh..(i + 1) * dh]);
        }
    }
    Tensor::new(vec![n, w.heads * dh], concat)?.matmul(&w.wo)
}

/// Plain multi-head self-attention (no prompts).
pub fn msa_forward<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    prompted_msa_forward(x, &Tensor::zeros(vec![0, w.d]), w)
}

/// One attention-output row written as a mixture of experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEDecomposition<T> {
    pub head: usize,
    pub row: usize,
    /// Number of pre-trained experts (input tokens); the rest are prompt
    /// experts.
    pub n_tokens: usize,
    pub expert_values: Vec<Vec<T>>,
    pub score_values: Vec<T>,
}

impl<T: Scalar> MoEDecomposition<T> {
    pub fn prompt_experts(&self) -> &[Vec<T>] {
        &self.expert_values[self.n_tokens..]
    }

    pub fn pretrained_experts(&self) -> &[Vec<T>] {
        &self.expert_values[..self.n_tokens]
    }

    pub fn gating_weights(&self) -> Vec<T> {
        softmax_slice(&self.score_values)
    }
}

/// Experts and scores of output row `row` (0-based) of head `head`
/// (0-based).
pub fn moe_decompose<T: Scalar>(
    x: &Tensor<T>,
    prompts: &Tensor<T>,
    w: &AttentionWeights<T>,
    head: usize,
    row: usize,
) -> Result<MoEDecomposition<T>> {
    w.check_tokens(x, "X", false)?;
    w.check_tokens(prompts, "P", true)?;
    let n = x.rows();
    if head >= w.heads {
        return Err(Error::Index { what: "head", index: head, len: w.heads });
    }
    if row >= n {
        return Err(Error::Index { what: "row", index: row, len: n });
    }
    let prompts = as_matrix(prompts, w.d);
    let tokens = (0..n).map(|j| x.row(j)).chain((0..prompts.rows()).map(|j| prompts.row(j)));

    let wv_t = w.wv[head].transpose()?;
    // x_i^T Wq Wk^T t_j = (Wq^T x_i) · (Wk^T t_j)
    let query = w.wq[head].transpose()?.matvec(x.row(row))?;
    let wk_t = w.wk[head].transpose()?;
    let scale = T::one() / T::from_usize(w.head_dim()).sqrt();

    let mut expert_values = Vec::with_capacity(n + prompts.rows());
    let mut score_values = Vec::with_capacity(n + prompts.rows());
    for t in tokens {
        expert_values.push(wv_t.matvec(t)?);
        score_values.push(dot(&query, &wk_t.matvec(t)?) * scale);
    }
    Ok(MoEDecomposition { head, row, n_tokens: n, expert_values, score_values })
}

/// Softmax-gated sum of the expert values.
pub fn moe_eval<T: Scalar>(dec: &MoEDecomposition<T>) -> Result<Tensor<T>> {
    let dv = dec.expert_values.first().map_or(0, Vec::len);
    if dec.expert_values.is_empty() || dec.expert_values.len() != dec.score_values.len() {
        return shape_err(format!(
            "{} experts vs {} scores",
            dec.expert_values.len(),
            dec.score_values.len()
        ));
    }
    let gates = dec.gating_weights();
    let mut out = vec![T::zero(); dv];
    for (g, e) in gates.iter().zip(&dec.expert_values) {
        for (o, &v) in out.iter_mut().zip(e) {
            *o += *g * v;
        }
    }
    Tensor::vector(out)
}
