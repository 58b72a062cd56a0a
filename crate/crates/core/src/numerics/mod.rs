//! Dense `f64` tensors, reverse-mode differentiation and the primitive layers
//! (linear, layer normalization, GELU, softmax, two-layer MLP) every other
//! module is built from.
//!
//! The free functions in this module are the plain-tensor forms of the
//! primitives. The same computations, recorded for differentiation, are the
//! methods of [`Graph`].

mod gradcheck;
mod graph;
pub mod kernels;
mod layers;
mod params;
pub mod sparse_attention;
mod tensor;

pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, numeric_gradients};
pub use graph::{Bound, Gradients, Graph, Var};
pub use layers::{LinearLayer, MlpLayer, NormLayer};
pub use params::{trunc_normal, NamedTensor, ParamId, ParamSnapshot, ParamStore};
pub use sparse_attention::AttentionPattern;
pub use tensor::Tensor;

use crate::error::{config_err, Result};

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f64 = 1e-5;

/// Weight and bias of a linear map, `weight` is `d_in × d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Per-channel gain (γ) and shift (β).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub fc1: LayerParams,
    pub fc2: LayerParams,
}

/// `y = x·W + b` applied to the last axis of `x`.
pub fn linear(x: &Tensor, p: &LayerParams) -> Result<Tensor> {
    let ws = p.weight.shape();
    if ws.len() != 2 || x.cols() != ws[0] || p.bias.len() != ws[1] {
        return config_err(format!(
            "linear: input {:?} incompatible with weight {:?} / bias {:?}",
            x.shape(),
            ws,
            p.bias.shape()
        ));
    }
    let y = kernels::matmul_bias(x.data(), x.rows(), ws[0], p.weight.data(), ws[1], Some(p.bias.data()));
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = ws[1];
    Tensor::new(&shape, y)
}

/// Row-wise `γ ⊙ (x − μ) / √(σ² + eps) + β`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.cols();
    if d == 0 || gamma.len() != d || beta.len() != d {
        return config_err(format!("layer_norm: {d} channels, gamma {:?}", gamma.shape()));
    }
    if eps <= 0.0 {
        return config_err("layer_norm: eps must be positive");
    }
    let (y, _, _) = kernels::layer_norm(x.data(), x.rows(), d, gamma.data(), beta.data(), eps);
    Tensor::new(x.shape(), y)
}

/// Exact-erf GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(kernels::gelu)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return config_err(format!("softmax: axis {axis} out of range for {shape:?}"));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[at(j)];
            }
            kernels::softmax_rows(&mut buf, n);
            for (j, b) in buf.iter().enumerate() {
                data[at(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// `linear → GELU → linear`.
pub fn mlp_forward(x: &Tensor, p: &MlpParams) -> Result<Tensor> {
    if p.fc1.d_out() != p.fc2.d_in() || p.fc2.d_out() != x.cols() {
        return config_err("mlp: parameter shapes do not chain back to the input width");
    }
    let h = gelu(&linear(x, &p.fc1)?);
    linear(&h, &p.fc2)
}
