//! Adaptive prompt tuning viewed as a mixture of experts.
//!
//! The crate provides the numeric kernels ([`tensor`]), prompted multi-head
//! attention and its exact per-row mixture-of-experts decomposition
//! ([`attention`]), the input-adaptive prompt generator ([`prompts`]),
//! reverse-mode gradients with a finite-difference oracle ([`grad`]), and
//! the least-squares estimation laboratory used to measure Voronoi-loss
//! convergence rates ([`estimation`]).
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! common choices.

pub mod attention;
pub mod autodiff;
pub mod dd;
pub mod error;
pub mod estimation;
pub mod grad;
pub mod params_io;
pub mod prompts;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision tensor, used on every verification path.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Tensor recorded on the autodiff tape.
pub type TensorVar = tensor::Tensor<autodiff::Var>;
pub type AttentionWeights64 = attention::AttentionWeights<f64>;
