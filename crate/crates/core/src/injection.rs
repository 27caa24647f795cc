//! Injection of per-pixel bin geometry into the token stream.
//!
//! After each refinement the new bin centers describe where the model will
//! look next. They are normalized into `[0, 1]`, projected by two 3x3
//! convolutions into the hidden width, and merged into the step's token
//! features with a convolutional GRU: the features act as the hidden state,
//! the projected bins as the input, and gates decide per pixel how much of
//! the bin information to blend in. Bin centers enter as constants — depth
//! geometry is data, not a differentiable function of the boundaries.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Weights of the two-layer bin projection (`N -> hidden -> hidden`).
#[derive(Debug, Clone, Copy)]
pub struct BinsProjectionParams {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

/// Gate convolutions of the ConvGRU. Each maps the channel-concatenated
/// pair (state, input) back to the hidden width with a 3x3 kernel.
#[derive(Debug, Clone, Copy)]
pub struct ConvGruParams {
    pub wz_w: Var,
    pub wz_b: Var,
    pub wr_w: Var,
    pub wr_b: Var,
    pub wc_w: Var,
    pub wc_b: Var,
}

/// Reinterprets a `(tokens, channels)` sequence as a `(channels, h, w)`
/// feature map, with tokens in row-major pixel order.
pub fn tokens_to_chw<F: Scalar>(g: &mut Graph<F>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::shape(
            "tokens_to_chw",
            format!("expected ({}, c) tokens for {h}x{w}, got {s:?}", h * w),
        ));
    }
    let t = g.transpose2(x)?;
    g.reshape(t, &[s[1], h, w])
}

/// Inverse of [`tokens_to_chw`].
pub fn chw_to_tokens<F: Scalar>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "chw_to_tokens",
            format!("expected (c, h, w) map, got {s:?}"),
        ));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose2(flat)
}

/// Projects normalized bin centers `(N, h, w)` to hidden-width features
/// with conv -> SiLU -> conv.
pub fn project_bins<F: Scalar>(
    g: &mut Graph<F>,
    params: &BinsProjectionParams,
    centers_norm: Var,
) -> Result<Var> {
    let s = g.shape(centers_norm).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "project_bins",
            format!("expected (bins, h, w) centers, got {s:?}"),
        ));
    }
    let c1 = g.conv2d(centers_norm, params.conv1_w, params.conv1_b, 1)?;
    let a = g.silu(c1)?;
    g.conv2d(a, params.conv2_w, params.conv2_b, 1)
}

/// One ConvGRU update. `state` and `input` are `(hidden, h, w)` maps of the
/// same shape; the result blends candidate features into the state:
///
/// ```text
/// z = sigmoid(conv_z[state ; input])      update gate
/// r = sigmoid(conv_r[state ; input])      reset gate
/// c = tanh(conv_c[r*state ; input])       candidate
/// out = state + z * (c - state)
/// ```
pub fn conv_gru_step<F: Scalar>(
    g: &mut Graph<F>,
    params: &ConvGruParams,
    state: Var,
    input: Var,
) -> Result<Var> {
    let (ss, si) = (g.shape(state).to_vec(), g.shape(input).to_vec());
    if ss.len() != 3 || ss != si {
        return Err(Error::shape(
            "conv_gru_step",
            format!("state {ss:?} and input {si:?} must be matching (c, h, w) maps"),
        ));
    }
    let hx = g.concat0(state, input)?;
    let z_pre = g.conv2d(hx, params.wz_w, params.wz_b, 1)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = g.conv2d(hx, params.wr_w, params.wr_b, 1)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, state)?;
    let rhx = g.concat0(rh, input)?;
    let c_pre = g.conv2d(rhx, params.wc_w, params.wc_b, 1)?;
    let c = g.tanh(c_pre)?;
    let delta = g.sub(c, state)?;
    let gated = g.mul(z, delta)?;
    g.add(state, gated)
}
