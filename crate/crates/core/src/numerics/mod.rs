//! Dense-tensor engine: row-major tensors, forward compute kernels, a
//! tape-based reverse-mode gradient graph, and finite-difference
//! verification.
//!
//! Precision is a type parameter: `f64` for correctness and gradient
//! checking, `f32` for training throughput. Every kernel is deterministic
//! at any thread count — parallel loops write disjoint chunks and floating
//! reductions use fixed association orders.

pub mod fdcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use fdcheck::{finite_diff_check, FdReport, FdSettings};
pub use graph::{Graph, Var};
pub use kernels::UpsampleMode;
pub use tensor::{Scalar, Tensor};

use crate::error::Result;

/// Shift-invariant softmax along `axis` (pure, non-tape entry point).
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    kernels::softmax(x, axis)
}

/// Last-axis layer normalization with elementwise affine (pure entry point).
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    kernels::layer_norm(x, gamma, beta, eps)
}

/// Matrix product, batched over a leading extent for rank-3 inputs.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    kernels::matmul(a, b)
}

/// 3x3 same-padding convolution over a `(C,H,W)` map (pure entry point).
pub fn conv2d_3x3<F: Scalar>(
    x: &Tensor<F>,
    kernel: &Tensor<F>,
    bias: &Tensor<F>,
) -> Result<Tensor<F>> {
    kernels::conv2d_fwd(x, kernel, bias, 1)
}

/// Double both spatial extents of a `(C,H,W)` map.
pub fn upsample2x<F: Scalar>(x: &Tensor<F>, mode: UpsampleMode) -> Result<Tensor<F>> {
    kernels::upsample2x(x, mode)
}
