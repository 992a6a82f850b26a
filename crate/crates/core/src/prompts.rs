//! Input-adaptive prompt generation.
//!
//! Per block, the `N = H·W` input tokens go through
//!
//! 1. a per-token LayerNorm with block-local gain and bias,
//! 2. a `K×K` convolution whose single kernel is shared by all channels,
//! 3. `N_p` token-wise projectors (learned weighted sums over the
//!    `H'·W'` convolved positions),
//! 4. the feature projector `g(x) = W2·σ(W1·x)`, one instance shared by
//!    every block.
//!
//! The result is `N_p` prompt tokens that depend on the block's input, fed
//! to the frozen attention layer as extra keys and values.

use serde::{Deserialize, Serialize};

use crate::attention::{prompted_msa_forward, AttentionWeights};
use crate::error::{shape_err, Error, Result};
use crate::grad::{Objective, ParamLayout, ParamVector};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{channelwise_conv2d, layer_norm_slice, Tensor, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            // Subgradient 0 at the kink.
            Activation::Relu => {
                if x.value() > 0.0 {
                    x
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y = σ(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

/// Sizes of the prompt generator. Convolution is stride 1 without padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptShapeConfig {
    /// Number of transformer blocks `L`.
    pub blocks: usize,
    /// Prompts per block `N_p`.
    pub prompts: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    /// Feature-projector rank `r`.
    pub rank: usize,
    /// Token width `d`.
    pub dim: usize,
}

impl PromptShapeConfig {
    /// Roughly ViT-B/16: 12 blocks, 14×14 patches, width 768.
    pub fn vit_b() -> Self {
        PromptShapeConfig { blocks: 12, prompts: 10, height: 14, width: 14, kernel: 3, rank: 8, dim: 768 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.prompts == 0 {
            return fail("prompts must be at least 1".into());
        }
        if self.kernel == 0 || self.kernel > self.height || self.kernel > self.width {
            return fail(format!(
                "kernel {} must be in 1..={} for a {}x{} map",
                self.kernel,
                self.height.min(self.width),
                self.height,
                self.width
            ));
        }
        if self.rank == 0 || self.rank >= self.dim {
            return fail(format!("rank {} must satisfy 1 <= r < d = {}", self.rank, self.dim));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn conv_height(&self) -> usize {
        (self.height + 1).saturating_sub(self.kernel)
    }

    pub fn conv_width(&self) -> usize {
        (self.width + 1).saturating_sub(self.kernel)
    }

    pub fn conv_tokens(&self) -> usize {
        self.conv_height() * self.conv_width()
    }
}

/// Trainable scalar count: token-wise projectors, convolutions and the
/// shared feature projector. LayerNorm affine terms are not included.
pub fn vapt_param_count(cfg: &PromptShapeConfig) -> u64 {
    let l = cfg.blocks as u64;
    l * cfg.prompts as u64 * cfg.conv_tokens() as u64
        + l * (cfg.kernel * cfg.kernel) as u64
        + 2 * (cfg.rank * cfg.dim) as u64
}

/// [`vapt_param_count`] plus the per-block LayerNorm gain and bias.
pub fn vapt_param_count_with_layer_norm(cfg: &PromptShapeConfig) -> u64 {
    vapt_param_count(cfg) + 2 * (cfg.blocks * cfg.dim) as u64
}

/// Static prompts: one `d`-vector per prompt per block.
pub fn vpt_param_count(cfg: &PromptShapeConfig) -> u64 {
    (cfg.blocks * cfg.prompts * cfg.dim) as u64
}

/// Block-local parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub conv_kernel: Tensor<T>,
    /// `N_p × (H'·W')` projector coefficients.
    pub alphas: Tensor<T>,
    pub ln_gain: Tensor<T>,
    pub ln_bias: Tensor<T>,
}

/// `g(x) = W2·σ(W1·x)` with `W1: r×d`, `W2: d×r`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjector<T> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> FeatureProjector<T> {
    pub fn apply(&self, x: &[T], act: Activation) -> Result<Vec<T>> {
        let hidden: Vec<T> = self.w1.matvec(x)?.into_iter().map(|u| act.apply(u)).collect();
        self.w2.matvec(&hidden)
    }
}

/// All trainable parameters of the prompt generator. The feature
/// projector is stored once and used by every block.
#[derive(Clone, Debug, PartialEq)]
pub struct VaptParams<T> {
    pub config: PromptShapeConfig,
    pub activation: Activation,
    /// When false the LayerNorm stage is skipped entirely; used to make
    /// algebraic identities exact in tests.
    pub layer_norm: bool,
    pub blocks: Vec<BlockParams<T>>,
    pub projector: FeatureProjector<T>,
}

impl<T: Scalar> VaptParams<T> {
    /// Random initialization: α uniform(±1/√(H'W')), W1 and W2
    /// uniform(±1/√d), kernels uniform(±1/K), LayerNorm gain 1 and bias 0.
    pub fn init(config: PromptShapeConfig, activation: Activation, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hw = config.conv_tokens();
        let k = config.kernel;
        let a = 1.0 / (hw as f64).sqrt();
        let kb = 1.0 / k as f64;
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                conv_kernel: rng.uniform_tensor(vec![k, k], -kb, kb),
                alphas: rng.uniform_tensor(vec![config.prompts, hw], -a, a),
                ln_gain: Tensor::from_f64(vec![d], &vec![1.0; d]).expect("finite"),
                ln_bias: Tensor::zeros(vec![d]),
            })
            .collect();
        let s = 1.0 / (d as f64).sqrt();
        let projector = FeatureProjector {
            w1: rng.uniform_tensor(vec![config.rank, d], -s, s),
            w2: rng.uniform_tensor(vec![d, config.rank], -s, s),
        };
        Ok(VaptParams { config, activation, layer_norm: true, blocks, projector })
    }

    /// Canonical flat ordering: per block kernel then alphas; the shared
    /// W1 and W2; then per block LayerNorm gain and bias.
    pub fn layout(config: &PromptShapeConfig) -> ParamLayout {
        let mut layout = ParamLayout::new();
        let (k, hw, d, r) = (config.kernel, config.conv_tokens(), config.dim, config.rank);
        for l in 0..config.blocks {
            layout.push(format!("block{l}.conv_kernel"), vec![k, k]);
            layout.push(format!("block{l}.alphas"), vec![config.prompts, hw]);
        }
        layout.push("projector.w1", vec![r, d]);
        layout.push("projector.w2", vec![d, r]);
        for l in 0..config.blocks {
            layout.push(format!("block{l}.ln_gain"), vec![d]);
            layout.push(format!("block{l}.ln_bias"), vec![d]);
        }
        layout
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(Self::layout(&self.config).total_len());
        for b in &self.blocks {
            out.extend_from_slice(b.conv_kernel.data());
            out.extend_from_slice(b.alphas.data());
        }
        out.extend_from_slice(self.projector.w1.data());
        out.extend_from_slice(self.projector.w2.data());
        for b in &self.blocks {
            out.extend_from_slice(b.ln_gain.data());
            out.extend_from_slice(b.ln_bias.data());
        }
        out
    }

    /// Rebuilds parameters from the canonical flat ordering.
    pub fn from_flat(
        config: PromptShapeConfig,
        activation: Activation,
        layer_norm: bool,
        flat: &[T],
    ) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if flat.len() != layout.total_len() {
            return shape_err(format!(
                "expected {} parameters, got {}",
                layout.total_len(),
                flat.len()
            ));
        }
        let take = |name: &str| -> Result<Tensor<T>> {
            let e = layout.get(name).expect("layout entry exists");
            Tensor::new(e.shape.clone(), flat[e.range()].to_vec())
        };
        let blocks = (0..config.blocks)
            .map(|l| {
                Ok(BlockParams {
                    conv_kernel: take(&format!("block{l}.conv_kernel"))?,
                    alphas: take(&format!("block{l}.alphas"))?,
                    ln_gain: take(&format!("block{l}.ln_gain"))?,
                    ln_bias: take(&format!("block{l}.ln_bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let projector = FeatureProjector { w1: take("projector.w1")?, w2: take("projector.w2")? };
        Ok(VaptParams { config, activation, layer_norm, blocks, projector })
    }

    pub fn cast<U: Scalar>(&self) -> VaptParams<U> {
        let flat: Vec<U> = self.to_flat().iter().map(|v| U::from_f64(v.value())).collect();
        VaptParams::from_flat(self.config, self.activation, self.layer_norm, &flat)
            .expect("layout is unchanged by a cast")
    }

    /// Counts scalars actually stored, optionally including LayerNorm.
    pub fn enumerate_scalars(&self, include_layer_norm: bool) -> u64 {
        let mut n = self.projector.w1.len() + self.projector.w2.len();
        for b in &self.blocks {
            n += b.conv_kernel.len() + b.alphas.len();
            if include_layer_norm {
                n += b.ln_gain.len() + b.ln_bias.len();
            }
        }
        n as u64
    }
}

impl VaptParams<f64> {
    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector::new(self.to_flat(), Self::layout(&self.config)).expect("layout matches")
    }
}

/// `Σ_k alpha_row[k] · x_conv_flat[k]`.
pub fn token_wise_project<T: Scalar>(x_conv_flat: &Tensor<T>, alpha_row: &[T]) -> Result<Vec<T>> {
    let (rows, d) = match x_conv_flat.shape() {
        [r, d] => (*r, *d),
        s => return shape_err(format!("token-wise projector input must be 2-D, got {s:?}")),
    };
    if rows != alpha_row.len() {
        return shape_err(format!("{rows} tokens but {} coefficients", alpha_row.len()));
    }
    let mut out = vec![T::zero(); d];
    for (k, &a) in alpha_row.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(x_conv_flat.row(k)) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Aggregated features `G_j'(X_conv)` of `block`, one row per prompt, before
/// the feature projector.
pub fn aggregate_features<T: Scalar>(
    x: &Tensor<T>,
    params: &VaptParams<T>,
    block: usize,
) -> Result<Tensor<T>> {
    let cfg = &params.config;
    let bp = params.blocks.get(block).ok_or(Error::Index {
        what: "block",
        index: block,
        len: params.blocks.len(),
    })?;
    if x.shape() != [cfg.tokens(), cfg.dim] {
        return shape_err(format!(
            "input must be {}x{} (H·W = {}·{}), got {:?}",
            cfg.tokens(),
            cfg.dim,
            cfg.height,
            cfg.width,
            x.shape()
        ));
    }
    let normed = if params.layer_norm {
        let mut data = Vec::with_capacity(x.len());
        for i in 0..cfg.tokens() {
            data.extend(layer_norm_slice(x.row(i), bp.ln_gain.data(), bp.ln_bias.data(), LAYER_NORM_EPS)?);
        }
        Tensor::new(vec![cfg.height, cfg.width, cfg.dim], data)?
    } else {
        x.clone().reshape(vec![cfg.height, cfg.width, cfg.dim])?
    };
    let conv = channelwise_conv2d(&normed, &bp.conv_kernel)?
        .reshape(vec![cfg.conv_tokens(), cfg.dim])?;
    let mut out = Vec::with_capacity(cfg.prompts * cfg.dim);
    for j in 0..cfg.prompts {
        out.extend(token_wise_project(&conv, bp.alphas.row(j))?);
    }
    Tensor::new(vec![cfg.prompts, cfg.dim], out)
}

/// The `N_p × d` prompts of `block` for input tokens `x` (`N × d`).
pub fn generate_adaptive_prompts<T: Scalar>(
    x: &Tensor<T>,
    params: &VaptParams<T>,
    block: usize,
) -> Result<Tensor<T>> {
    let agg = aggregate_features(x, params, block)?;
    let cfg = &params.config;
    let mut out = Vec::with_capacity(cfg.prompts * cfg.dim);
    for j in 0..cfg.prompts {
        out.extend(params.projector.apply(agg.row(j), params.activation)?);
    }
    Tensor::new(vec![cfg.prompts, cfg.dim], out)
}

/// Prompted attention with prompts generated from the input itself.
pub fn vapt_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &VaptParams<T>,
    w: &AttentionWeights<T>,
    block: usize,
) -> Result<Tensor<T>> {
    let prompts = generate_adaptive_prompts(x, params, block)?;
    prompted_msa_forward(x, &prompts, w)
}

/// One input with its regression target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub x: Tensor<f64>,
    pub target: Tensor<f64>,
}

fn half_squared_error<S: Scalar>(out: &Tensor<S>, target: &Tensor<f64>) -> S {
    out.data()
        .iter()
        .zip(target.data())
        .fold(S::zero(), |acc, (&o, &t)| {
            let r = o - S::from_f64(t);
            acc + r * r
        })
        * S::from_f64(0.5)
}

/// Half squared error of prompted attention with static prompts; the
/// parameters are the `N_p × d` prompt matrix.
pub struct VptPromptLoss<'a> {
    pub batch: &'a [Sample],
    pub weights: &'a AttentionWeights<f64>,
    pub prompts: usize,
}

impl Objective for VptPromptLoss<'_> {
    fn eval<S: Scalar>(&self, params: &[S]) -> Result<S> {
        let w = self.weights.cast::<S>();
        let p = Tensor::new(vec![self.prompts, w.d()], params.to_vec())?;
        let mut loss = S::zero();
        for s in self.batch {
            let out = prompted_msa_forward(&s.x.cast(), &p, &w)?;
            loss += half_squared_error(&out, &s.target);
        }
        Ok(loss)
    }
}

/// Half squared error of the adaptive-prompt forward pass, summed over
/// every block (each block sees the same frozen attention layer), as a
/// function of the flat [`VaptParams`] vector.
pub struct VaptLoss<'a> {
    pub batch: &'a [Sample],
    pub weights: &'a AttentionWeights<f64>,
    pub config: PromptShapeConfig,
    pub activation: Activation,
    pub layer_norm: bool,
}

impl Objective for VaptLoss<'_> {
    fn eval<S: Scalar>(&self, params: &[S]) -> Result<S> {
        let w = self.weights.cast::<S>();
        let vp = VaptParams::from_flat(self.config, self.activation, self.layer_norm, params)?;
        let mut loss = S::zero();
        for s in self.batch {
            let x = s.x.cast::<S>();
            for l in 0..self.config.blocks {
                loss += half_squared_error(&vapt_forward(&x, &vp, &w, l)?, &s.target);
            }
        }
        Ok(loss)
    }
}
