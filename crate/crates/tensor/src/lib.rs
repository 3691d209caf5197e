//! Minimal deterministic dense-tensor kernel with exact reverse-mode gradients.
//!
//! All arithmetic is `f64`. [`Tensor`] is a plain value; [`Graph`] records
//! operations on [`Var`] handles and replays them backward.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod nn;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_inputs, grad_check_module, Coords};
pub use graph::{concat0, Graph, Unary, Var};
pub use nn::{Conv2d, GroupNorm, Init, Module, Param, ParamId};
pub use tensor::Tensor;

/// Inverted dropout keep-mask: entries are `0` or `1/(1−p)`.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl rand::Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.gen::<f64>() < p { 0.0 } else { keep })
}
