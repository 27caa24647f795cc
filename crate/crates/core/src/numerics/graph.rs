//! Tape-based reverse-mode automatic differentiation.
//!
//! [`Graph`] is a Wengert list: every operation evaluates eagerly, stores its
//! result, and records how to push adjoints back to its inputs. Handles
//! ([`Var`]) are plain indices into the tape.
//!
//! Gradient semantics: leaves created with [`Graph::leaf`] accumulate
//! gradients across repeated [`Graph::backward`] calls until
//! [`Graph::zero_grads`] is called. Constants ([`Graph::constant`]) never
//! receive gradients and prune the backward walk.
//!
//! Every forward operation validates shapes and rejects non-finite results,
//! reporting the operation name and the offending flat index, so poisoned
//! values surface at their source instead of propagating.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, UpsampleMode};
use super::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Guard for [`Graph::sqrt`] backward: `d/dx sqrt` at 0 is unbounded, so the
/// denominator is floored. Inputs that small only arise in degenerate
/// zero-residual losses.
const SQRT_BWD_FLOOR: f64 = 1e-20;

#[derive(Clone)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    // The shift of an affine op is irrelevant to backward, so only the
    // scale is recorded.
    Affine { a: Var, k: f64 },
    Clamp { a: Var, lo: f64, hi: f64 },
    AddRow { a: Var, b: Var },
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    MatmulPrefix { p: Var, v: Var, plens: Arc<Vec<usize>> },
    AttnProbs { q: Var, k: Var, scale: f64, plens: Arc<Vec<usize>> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Upsample2x { x: Var, mode: UpsampleMode },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Ln(Var),
    Sqrt(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Softmax { x: Var, axis: usize },
    ColSlice { a: Var, from: usize, to: usize },
    RowSlice { a: Var, from: usize, to: usize },
    ConcatCols(Vec<Var>),
    Concat0(Var, Var),
    Reshape(Var),
    Transpose2(Var),
    Sum(Var),
    RowSum(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op,
    needs_grad: bool,
    /// Persistent accumulated gradient; populated only for trainable leaves.
    grad: Option<Tensor<F>>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf; `None` until a backward pass
    /// has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op) -> Result<Var> {
        if let Some((index, v)) = value.first_non_finite() {
            return Err(Error::NonFinite {
                op: op_name,
                index,
                value: v.as_f64(),
            });
        }
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => self.any_input_needs_grad(other),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_input_needs_grad(&self, op: &Op) -> bool {
        let mut needs = false;
        visit_inputs(op, |v| needs |= self.nodes[v.0].needs_grad);
        needs
    }

    // -- sources -----------------------------------------------------------

    /// Trainable leaf: participates in gradient accumulation.
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf { trainable: true })
    }

    /// Non-trainable input: backward never descends into it.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push("constant", value, Op::Leaf { trainable: false })
    }

    // -- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("operand shapes {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b))
    }

    /// `k * a + c` with literal scalars.
    pub fn affine(&mut self, a: Var, k: f64, c: f64) -> Result<Var> {
        let (kf, cf) = (F::lit(k), F::lit(c));
        let v = self.nodes[a.0].value.map(|x| kf * x + cf);
        self.push("affine", v, Op::Affine { a, k })
    }

    /// Clamp into `[lo, hi]`; gradient passes through inside the interval
    /// (boundaries included) and is zero outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::shape("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let (lf, hf) = (F::lit(lo), F::lit(hi));
        let v = self.nodes[a.0].value.map(|x| x.max(lf).min(hf));
        self.push("clamp", v, Op::Clamp { a, lo, hi })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x * sigmoid_one(x));
        self.push("silu", v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(sigmoid_one);
        self.push("sigmoid", v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        self.push("tanh", v, Op::Tanh(a))
    }

    /// Natural log; non-positive inputs produce a `NonFinite` error carrying
    /// the offending index.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x.ln());
        self.push("ln", v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.nodes[a.0].value.map(|x| x.sqrt());
        self.push("sqrt", v, Op::Sqrt(a))
    }

    // -- linear algebra ----------------------------------------------------

    /// Row-broadcast bias add: `a (m,n) + b (n)`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::shape(
                "add_row",
                format!("expected (m,n) + (n), got {sa:?} + {sb:?}"),
            ));
        }
        let (m, n) = (sa[0], sa[1]);
        let mut v = self.nodes[a.0].value.clone();
        let bd = self.nodes[b.0].value.data();
        for r in 0..m {
            for (x, &bv) in v.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bd) {
                *x = *x + bv;
            }
        }
        self.push("add_row", v, Op::AddRow { a, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push("matmul", v, Op::Matmul(a, b))
    }

    /// `a · b^T`; the convention for applying `(out, in)` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        self.push("matmul_nt", v, Op::MatmulNT(a, b))
    }

    pub fn matmul_prefix(&mut self, p: Var, v: Var, plens: Arc<Vec<usize>>) -> Result<Var> {
        let out = kernels::matmul_prefix(&self.nodes[p.0].value, &self.nodes[v.0].value, &plens)?;
        self.push("matmul_prefix", out, Op::MatmulPrefix { p, v, plens })
    }

    pub fn attn_probs(&mut self, q: Var, k: Var, scale: f64, plens: Arc<Vec<usize>>) -> Result<Var> {
        let out =
            kernels::attn_probs_prefix(&self.nodes[q.0].value, &self.nodes[k.0].value, scale, &plens)?;
        self.push("attn_probs", out, Op::AttnProbs { q, k, scale, plens })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let v = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
            stride,
        )?;
        self.push("conv2d", v, Op::Conv2d { x, w, b, stride })
    }

    pub fn upsample2x(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let v = kernels::upsample2x(&self.nodes[x.0].value, mode)?;
        self.push("upsample2x", v, Op::Upsample2x { x, mode })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let v = kernels::layer_norm(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            eps,
        )?;
        self.push("layer_norm", v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(&self.nodes[x.0].value, axis)?;
        self.push("softmax", v, Op::Softmax { x, axis })
    }

    // -- shape manipulation ------------------------------------------------

    /// Columns `[from, to)` of a rank-2 tensor.
    pub fn col_slice(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || from >= to || to > s[1] {
            return Err(Error::shape(
                "col_slice",
                format!("slice [{from}, {to}) of shape {s:?}"),
            ));
        }
        let (m, n, w) = (s[0], s[1], to - from);
        let mut v = Tensor::zeros(&[m, w]);
        let ad = self.nodes[a.0].value.data();
        for r in 0..m {
            v.data_mut()[r * w..(r + 1) * w].copy_from_slice(&ad[r * n + from..r * n + to]);
        }
        self.push("col_slice", v, Op::ColSlice { a, from, to })
    }

    /// Leading-axis slice `[from, to)`; trailing axes are kept whole.
    pub fn row_slice(&mut self, a: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || from >= to || to > s[0] {
            return Err(Error::shape(
                "row_slice",
                format!("slice [{from}, {to}) of shape {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = to - from;
        let v = Tensor::from_vec(
            &shape,
            self.nodes[a.0].value.data()[from * inner..to * inner].to_vec(),
        )?;
        self.push("row_slice", v, Op::RowSlice { a, from, to })
    }

    /// Concatenate rank-2 tensors along columns (equal row counts).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no operands".to_string()));
        }
        let m = self.shape(parts[0])[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("operand shape {s:?} incompatible with {m} rows"),
                ));
            }
            total += s[1];
        }
        let mut v = Tensor::zeros(&[m, total]);
        let mut col = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let pd = self.nodes[p.0].value.data();
            for r in 0..m {
                v.data_mut()[r * total + col..r * total + col + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            col += w;
        }
        self.push("concat_cols", v, Op::ConcatCols(parts.to_vec()))
    }

    /// Concatenate along the leading axis (trailing extents must match).
    pub fn concat0(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::shape(
                "concat0",
                format!("trailing extents differ: {sa:?} vs {sb:?}"),
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.nodes[a.0].value.numel() + self.nodes[b.0].value.numel());
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let v = Tensor::from_vec(&shape, data)?;
        self.push("concat0", v, Op::Concat0(a, b))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(a)),
            ));
        }
        let v = Tensor::from_vec(shape, self.nodes[a.0].value.data().to_vec())?;
        self.push("reshape", v, Op::Reshape(a))
    }

    pub fn transpose2(&mut self, a: Var) -> Result<Var> {
        let v = kernels::transpose2(&self.nodes[a.0].value)?;
        self.push("transpose2", v, Op::Transpose2(a))
    }

    // -- reductions --------------------------------------------------------

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = kernels::stable_sum(self.nodes[a.0].value.data());
        self.push("sum", Tensor::from_vec(&[1], vec![total])?, Op::Sum(a))
    }

    /// Sum a rank-2 tensor along its last axis: `(m, n) -> (m)`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("row_sum", format!("expected rank 2, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let ad = self.nodes[a.0].value.data();
        let mut v = Tensor::zeros(&[m]);
        for r in 0..m {
            v.data_mut()[r] = kernels::stable_sum(&ad[r * n..(r + 1) * n]);
        }
        self.push("row_sum", v, Op::RowSum(a))
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Adds `dLoss/dLeaf` into every
    /// trainable leaf's persistent gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be a [1] scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut adjoints: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Tensor::full(&[1], F::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adjoints[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf { trainable } => {
                    if trainable {
                        match &mut self.nodes[id].grad {
                            Some(acc) => add_into(acc, &g),
                            slot => *slot = Some(g),
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoints, b, g.clone());
                    self.accumulate(&mut adjoints, a, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.map(|x| -x);
                    self.accumulate(&mut adjoints, b, neg);
                    self.accumulate(&mut adjoints, a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&g, &self.nodes[b.0].value, |x, y| x * y);
                    let db = zip_map(&g, &self.nodes[a.0].value, |x, y| x * y);
                    self.accumulate(&mut adjoints, a, da);
                    self.accumulate(&mut adjoints, b, db);
                }
                Op::Affine { a, k } => {
                    let kf = F::lit(k);
                    self.accumulate(&mut adjoints, a, g.map(|x| kf * x));
                }
                Op::Clamp { a, lo, hi } => {
                    let (lf, hf) = (F::lit(lo), F::lit(hi));
                    let da = zip_map(&g, &self.nodes[a.0].value, |gv, x| {
                        if x >= lf && x <= hf {
                            gv
                        } else {
                            F::zero()
                        }
                    });
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::AddRow { a, b } => {
                    let (m, n) = (g.shape()[0], g.shape()[1]);
                    let mut db = Tensor::zeros(&[n]);
                    for r in 0..m {
                        for (acc, &gv) in db.data_mut().iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *acc += gv;
                        }
                    }
                    self.accumulate(&mut adjoints, b, db);
                    self.accumulate(&mut adjoints, a, g);
                }
                Op::Matmul(a, b) => {
                    let da = kernels::matmul_nt(&g, &self.nodes[b.0].value)?;
                    let db = kernels::matmul_tn(&self.nodes[a.0].value, &g)?;
                    self.accumulate(&mut adjoints, a, da);
                    self.accumulate(&mut adjoints, b, db);
                }
                Op::MatmulNT(a, b) => {
                    let da = kernels::matmul(&g, &self.nodes[b.0].value)?;
                    let db = kernels::matmul_tn(&g, &self.nodes[a.0].value)?;
                    self.accumulate(&mut adjoints, a, da);
                    self.accumulate(&mut adjoints, b, db);
                }
                Op::MatmulPrefix { p, v, plens } => {
                    let grads = kernels::matmul_prefix_bwd(
                        &self.nodes[p.0].value,
                        &self.nodes[v.0].value,
                        &g,
                        &plens,
                    );
                    self.accumulate(&mut adjoints, p, grads.dp);
                    self.accumulate(&mut adjoints, v, grads.dv);
                }
                Op::AttnProbs { q, k, scale, plens } => {
                    let grads = kernels::attn_probs_prefix_bwd(
                        &self.nodes[id].value,
                        &g,
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        scale,
                        &plens,
                    );
                    self.accumulate(&mut adjoints, q, grads.dq);
                    self.accumulate(&mut adjoints, k, grads.dk);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let dx = kernels::conv2d_bwd_input(
                        &g,
                        &self.nodes[w.0].value,
                        self.nodes[x.0].value.shape(),
                        stride,
                    );
                    let dw = kernels::conv2d_bwd_weight(
                        &g,
                        &self.nodes[x.0].value,
                        self.nodes[w.0].value.shape(),
                        stride,
                    );
                    let db = kernels::conv2d_bwd_bias(&g);
                    self.accumulate(&mut adjoints, x, dx);
                    self.accumulate(&mut adjoints, w, dw);
                    self.accumulate(&mut adjoints, b, db);
                }
                Op::Upsample2x { x, mode } => {
                    let dx = kernels::upsample2x_bwd(&g, self.nodes[x.0].value.shape(), mode);
                    self.accumulate(&mut adjoints, x, dx);
                }
                Op::Silu(a) => {
                    let da = zip_map(&g, &self.nodes[a.0].value, |gv, x| {
                        let s = sigmoid_one(x);
                        gv * s * (F::one() + x * (F::one() - s))
                    });
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, &self.nodes[id].value, |gv, y| gv * y * (F::one() - y));
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(&g, &self.nodes[id].value, |gv, y| gv * (F::one() - y * y));
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Ln(a) => {
                    let da = zip_map(&g, &self.nodes[a.0].value, |gv, x| gv / x);
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Sqrt(a) => {
                    let floor = F::lit(SQRT_BWD_FLOOR);
                    let half = F::lit(0.5);
                    let da = zip_map(&g, &self.nodes[id].value, |gv, y| gv * half / y.max(floor));
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let grads = kernels::layer_norm_bwd(
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        &g,
                        eps,
                    );
                    self.accumulate(&mut adjoints, x, grads.dx);
                    self.accumulate(&mut adjoints, gamma, grads.dgamma);
                    self.accumulate(&mut adjoints, beta, grads.dbeta);
                }
                Op::Softmax { x, axis } => {
                    let dx = kernels::softmax_bwd(&self.nodes[id].value, &g, axis);
                    self.accumulate(&mut adjoints, x, dx);
                }
                Op::ColSlice { a, from, to } => {
                    let s = self.nodes[a.0].value.shape();
                    let (m, n, w) = (s[0], s[1], to - from);
                    let mut da = Tensor::zeros(s);
                    for r in 0..m {
                        da.data_mut()[r * n + from..r * n + to]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::RowSlice { a, from, to } => {
                    let s = self.nodes[a.0].value.shape().to_vec();
                    let inner: usize = s[1..].iter().product();
                    let mut da = Tensor::zeros(&s);
                    da.data_mut()[from * inner..to * inner].copy_from_slice(g.data());
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::ConcatCols(parts) => {
                    let m = g.shape()[0];
                    let total = g.shape()[1];
                    let mut col = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.shape()[1];
                        let mut dp = Tensor::zeros(&[m, w]);
                        for r in 0..m {
                            dp.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(&mut adjoints, p, dp);
                        col += w;
                    }
                }
                Op::Concat0(a, b) => {
                    let na = self.nodes[a.0].value.numel();
                    let da = Tensor::from_vec(
                        self.nodes[a.0].value.shape(),
                        g.data()[..na].to_vec(),
                    )?;
                    let db = Tensor::from_vec(
                        self.nodes[b.0].value.shape(),
                        g.data()[na..].to_vec(),
                    )?;
                    self.accumulate(&mut adjoints, a, da);
                    self.accumulate(&mut adjoints, b, db);
                }
                Op::Reshape(a) => {
                    let da =
                        Tensor::from_vec(self.nodes[a.0].value.shape(), g.data().to_vec())?;
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Transpose2(a) => {
                    let da = kernels::transpose2(&g)?;
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    let da = Tensor::full(self.nodes[a.0].value.shape(), gv);
                    self.accumulate(&mut adjoints, a, da);
                }
                Op::RowSum(a) => {
                    let s = self.nodes[a.0].value.shape();
                    let (m, n) = (s[0], s[1]);
                    let mut da = Tensor::zeros(s);
                    for r in 0..m {
                        let gv = g.data()[r];
                        for x in da.data_mut()[r * n..(r + 1) * n].iter_mut() {
                            *x = gv;
                        }
                    }
                    self.accumulate(&mut adjoints, a, da);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, adjoints: &mut [Option<Tensor<F>>], v: Var, t: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(self.nodes[v.0].value.shape(), t.shape());
        match &mut adjoints[v.0] {
            Some(acc) => add_into(acc, &t),
            slot => *slot = Some(t),
        }
    }
}

fn visit_inputs(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf { .. } => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Matmul(a, b)
        | Op::MatmulNT(a, b)
        | Op::Concat0(a, b)
        | Op::AddRow { a, b } => {
            f(*a);
            f(*b);
        }
        Op::MatmulPrefix { p, v, .. } => {
            f(*p);
            f(*v);
        }
        Op::AttnProbs { q, k, .. } => {
            f(*q);
            f(*k);
        }
        Op::Conv2d { x, w, b, .. } => {
            f(*x);
            f(*w);
            f(*b);
        }
        Op::LayerNorm { x, gamma, beta, .. } => {
            f(*x);
            f(*gamma);
            f(*beta);
        }
        Op::ConcatCols(parts) => {
            for p in parts {
                f(*p);
            }
        }
        Op::Affine { a, .. }
        | Op::Clamp { a, .. }
        | Op::Silu(a)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::Softmax { x: a, .. }
        | Op::Upsample2x { x: a, .. }
        | Op::ColSlice { a, .. }
        | Op::RowSlice { a, .. }
        | Op::Reshape(a)
        | Op::Transpose2(a)
        | Op::Sum(a)
        | Op::RowSum(a) => f(*a),
    }
}

#[inline]
fn sigmoid_one<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("shapes match")
}

fn add_into<F: Scalar>(acc: &mut Tensor<F>, t: &Tensor<F>) {
    debug_assert_eq!(acc.shape(), t.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.5]).unwrap()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn softmax_nll_grad_is_p_minus_onehot() {
        // loss = -ln p[target]; d loss / d logits = p - onehot(target)
        let mut g = Graph::<f64>::new();
        let logits = g
            .leaf(Tensor::from_vec(&[1, 4], vec![0.2, -1.0, 0.7, 0.1]).unwrap())
            .unwrap();
        let p = g.softmax(logits, 1).unwrap();
        let onehot = g
            .constant(Tensor::from_vec(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let picked = g.mul(p, onehot).unwrap();
        let picked = g.sum(picked).unwrap();
        let logp = g.ln(picked).unwrap();
        let loss = g.affine(logp, -1.0, 0.0).unwrap();
        g.backward(loss).unwrap();
        let probs = g.value(p).data().to_vec();
        let grad = g.grad(logits).unwrap().data();
        for i in 0..4 {
            let expect = probs[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-12, "coord {i}");
        }
    }

    #[test]
    fn constant_subgraph_contributes_nothing() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let c = g.constant(Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap()).unwrap();
        let prod = g.mul(c, c).unwrap(); // pure constant subgraph
        let both = g.add(x, prod).unwrap();
        let loss = g.sum(both).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap()).unwrap();
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn ln_of_zero_reports_offending_index() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![1.0, 0.0, 2.0]).unwrap()).unwrap();
        match g.ln(x) {
            Err(Error::NonFinite { op, index, .. }) => {
                assert_eq!(op, "ln");
                assert_eq!(index, 1);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn matmul_chain_grads_match_hand_derivation() {
        // loss = sum(A·x) with A (2,2) leaf and x (2,1) leaf.
        // dA = ones(2,1)·x^T per row; dx = A^T·ones.
        let mut g = Graph::<f64>::new();
        let a = g
            .leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let x = g.leaf(Tensor::from_vec(&[2, 1], vec![5.0, 7.0]).unwrap()).unwrap();
        let y = g.matmul(a, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn col_slice_concat_roundtrip_passes_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g
            .leaf(Tensor::from_vec(&[2, 4], (0..8).map(|v| v as f64).collect()).unwrap())
            .unwrap();
        let left = g.col_slice(x, 0, 2).unwrap();
        let right = g.col_slice(x, 2, 4).unwrap();
        let back = g.concat_cols(&[left, right]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
        let loss = g.sum(back).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 8]);
    }
}
