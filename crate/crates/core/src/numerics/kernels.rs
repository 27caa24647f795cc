//! Forward and backward compute kernels.
//!
//! Every kernel is deterministic at any thread count: parallel loops write
//! disjoint regions and float reductions use a fixed association order
//! (see [`crate::par`]). Shapes are validated here so both the pure ops in
//! [`super::ops`] and the tape in [`super::graph`] share one set of checks.

use crate::error::{Error, Result};
use crate::par;

use super::tensor::{Scalar, Tensor};

/// Interpolation mode for [`upsample2x`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(Error::Config(format!(
                "unknown upsample mode {other:?} (expected \"nearest\" or \"bilinear\")"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// dot / axpy building blocks

/// Dot product with sixteen independent accumulators. The lane loop
/// vectorizes; the combination order is fixed so results do not depend on
/// chunking.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (ax, bx) in ca.zip(cb) {
        for l in 0..16 {
            acc[l] = acc[l] + ax[l] * bx[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    let mut tree = [F::zero(); 8];
    for l in 0..8 {
        tree[l] = acc[2 * l] + acc[2 * l + 1];
    }
    (((tree[0] + tree[1]) + (tree[2] + tree[3])) + ((tree[4] + tree[5]) + (tree[6] + tree[7])))
        + tail
}

#[inline]
fn axpy<F: Scalar>(out: &mut [F], s: F, x: &[F]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + s * v;
    }
}

/// Fixed-order sum; sixteen accumulators so the loop vectorizes.
pub fn stable_sum<F: Scalar>(x: &[F]) -> F {
    let mut acc = [F::zero(); 16];
    let chunks = x.chunks_exact(16);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..16 {
            acc[l] = acc[l] + c[l];
        }
    }
    let mut tail = F::zero();
    for &v in rem {
        tail = tail + v;
    }
    let mut tree = [F::zero(); 8];
    for l in 0..8 {
        tree[l] = acc[2 * l] + acc[2 * l + 1];
    }
    (((tree[0] + tree[1]) + (tree[2] + tree[3])) + ((tree[4] + tree[5]) + (tree[6] + tree[7])))
        + tail
}

// ---------------------------------------------------------------------------
// matmul

fn mm_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    // Returns (batch, m, k, n); batch 0 marks the unbatched rank-2 case.
    match (a.len(), b.len()) {
        (2, 2) => {
            if a[1] != b[0] {
                return Err(Error::shape(
                    op,
                    format!("inner extents disagree: {a:?} x {b:?}"),
                ));
            }
            Ok((0, a[0], a[1], b[1]))
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(Error::shape(
                    op,
                    format!("batched extents disagree: {a:?} x {b:?}"),
                ));
            }
            Ok((a[0], a[1], a[2], b[2]))
        }
        _ => Err(Error::shape(
            op,
            format!("expected two rank-2 or two rank-3 tensors, got {a:?} x {b:?}"),
        )),
    }
}

/// Output rows processed together so operands shared across rows (weight
/// rows, key/value rows) are read once per block instead of once per row.
/// Blocking never changes each output element's accumulation order, so
/// results are bitwise identical to the row-at-a-time form.
const ROW_BLOCK: usize = 8;

fn mm_nn_block<F: Scalar>(c: &mut [F], a: &[F], b: &[F], _m: usize, k: usize, n: usize) {
    par::for_each_row_block(c, n, ROW_BLOCK, |i0, block| {
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            for (r, c_row) in block.chunks_mut(n).enumerate() {
                axpy(c_row, a[(i0 + r) * k + p], b_row);
            }
        }
    });
}

/// `a (m,k) x b (k,n) -> (m,n)`, or batched `(B,m,k) x (B,k,n) -> (B,m,n)`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (batch, m, k, n) = mm_dims("matmul", a.shape(), b.shape())?;
    if batch == 0 {
        let mut c = Tensor::zeros(&[m, n]);
        mm_nn_block(c.data_mut(), a.data(), b.data(), m, k, n);
        Ok(c)
    } else {
        let mut c = Tensor::zeros(&[batch, m, n]);
        for bi in 0..batch {
            let (ao, bo, co) = (bi * m * k, bi * k * n, bi * m * n);
            mm_nn_block(
                &mut c.data_mut()[co..co + m * n],
                &a.data()[ao..ao + m * k],
                &b.data()[bo..bo + k * n],
                m,
                k,
                n,
            );
        }
        Ok(c)
    }
}

/// `a (m,k) x b^T` with `b (n,k)` -> `(m,n)`. Row-by-row dot products.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape(
            "matmul_nt",
            format!("expected (m,k) x (n,k), got {sa:?} x {sb:?}"),
        ));
    }
    let (m, k, n) = (sa[0], sa[1], sb[0]);
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    par::for_each_row_block(c.data_mut(), n, ROW_BLOCK, |i0, block| {
        for j in 0..n {
            let b_row = &bd[j * k..(j + 1) * k];
            for (r, c_row) in block.chunks_mut(n).enumerate() {
                let i = i0 + r;
                c_row[j] = dot(&ad[i * k..(i + 1) * k], b_row);
            }
        }
    });
    Ok(c)
}

/// `a^T x b` with `a (k,m)`, `b (k,n)` -> `(m,n)`.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::shape(
            "matmul_tn",
            format!("expected (k,m) x (k,n), got {sa:?} x {sb:?}"),
        ));
    }
    let (k, m, n) = (sa[0], sa[1], sb[1]);
    let mut c = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    // c[i][j] = sum_p a[p][i] * b[p][j]; accumulate row-wise axpy over p.
    par::for_each_row_block(c.data_mut(), n, ROW_BLOCK, |i0, block| {
        for p in 0..k {
            let b_row = &bd[p * n..(p + 1) * n];
            for (r, c_row) in block.chunks_mut(n).enumerate() {
                axpy(c_row, ad[p * m + i0 + r], b_row);
            }
        }
    });
    Ok(c)
}

// ---------------------------------------------------------------------------
// conv2d (square kernel 1x1 or 3x3, zero padding k/2, stride 1 or 2)

pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

pub fn conv_spec(
    x_shape: &[usize],
    w_shape: &[usize],
    b_shape: &[usize],
    stride: usize,
) -> Result<ConvSpec> {
    if x_shape.len() != 3 || w_shape.len() != 4 || b_shape.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("expected x (C,H,W), w (O,C,k,k), b (O); got {x_shape:?}, {w_shape:?}, {b_shape:?}"),
        ));
    }
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, wc, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    if kh != kw || (kh != 1 && kh != 3) {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be 1x1 or 3x3, got {kh}x{kw}"),
        ));
    }
    if wc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels but kernel expects {wc}"),
        ));
    }
    if b_shape[0] != c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias has {} entries for {c_out} output channels", b_shape[0]),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape("conv2d", format!("stride must be 1 or 2, got {stride}")));
    }
    let pad = kh / 2;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvSpec {
        c_in,
        c_out,
        ksize: kh,
        stride,
        h,
        w,
        oh,
        ow,
    })
}

pub fn conv2d_fwd<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
) -> Result<Tensor<F>> {
    let s = conv_spec(x.shape(), weight.shape(), bias.shape(), stride)?;
    let pad = s.ksize / 2;
    let mut out = Tensor::zeros(&[s.c_out, s.oh, s.ow]);
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let plane = s.oh * s.ow;
    par::for_each_chunk(out.data_mut(), plane, |oc, out_plane| {
        let b = bd[oc];
        for v in out_plane.iter_mut() {
            *v = b;
        }
        for ic in 0..s.c_in {
            let x_plane = &xd[ic * s.h * s.w..(ic + 1) * s.h * s.w];
            for ky in 0..s.ksize {
                for kx in 0..s.ksize {
                    let wv = wd[((oc * s.c_in + ic) * s.ksize + ky) * s.ksize + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    for oy in 0..s.oh {
                        let iy = (oy * s.stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                        let o_row = &mut out_plane[oy * s.ow..(oy + 1) * s.ow];
                        conv_row_fwd(o_row, x_row, wv, kx as isize - pad as isize, s.stride, s.w);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `o_row[ox] += wv * x_row[ox*stride + dx]` for in-range taps.
#[inline]
fn conv_row_fwd<F: Scalar>(o_row: &mut [F], x_row: &[F], wv: F, dx: isize, stride: usize, w: usize) {
    if stride == 1 {
        // Contiguous shifted axpy.
        let ow = o_row.len();
        let (o_lo, x_lo) = if dx < 0 { ((-dx) as usize, 0) } else { (0, dx as usize) };
        let span = (ow - o_lo).min(w - x_lo);
        axpy(&mut o_row[o_lo..o_lo + span], wv, &x_row[x_lo..x_lo + span]);
    } else {
        for (ox, o) in o_row.iter_mut().enumerate() {
            let ix = (ox * stride) as isize + dx;
            if ix >= 0 && (ix as usize) < w {
                *o = *o + wv * x_row[ix as usize];
            }
        }
    }
}

pub fn conv2d_bwd_input<F: Scalar>(
    grad_out: &Tensor<F>,
    weight: &Tensor<F>,
    x_shape: &[usize],
    stride: usize,
) -> Tensor<F> {
    let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let ws = weight.shape();
    let (c_out, ksize) = (ws[0], ws[2]);
    let pad = ksize / 2;
    let gs = grad_out.shape();
    let (oh, ow) = (gs[1], gs[2]);
    let mut dx = Tensor::zeros(x_shape);
    let (gd, wd) = (grad_out.data(), weight.data());
    par::for_each_chunk(dx.data_mut(), h * w, |ic, dx_plane| {
        for oc in 0..c_out {
            let g_plane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let wv = wd[((oc * c_in + ic) * ksize + ky) * ksize + kx];
                    if wv == F::zero() {
                        continue;
                    }
                    let dxk = kx as isize - pad as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        let d_row = &mut dx_plane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            let (g_lo, x_lo) =
                                if dxk < 0 { ((-dxk) as usize, 0) } else { (0, dxk as usize) };
                            let span = (ow - g_lo).min(w - x_lo);
                            axpy(&mut d_row[x_lo..x_lo + span], wv, &g_row[g_lo..g_lo + span]);
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                let ix = (ox * stride) as isize + dxk;
                                if ix >= 0 && (ix as usize) < w {
                                    d_row[ix as usize] = d_row[ix as usize] + wv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn conv2d_bwd_weight<F: Scalar>(
    grad_out: &Tensor<F>,
    x: &Tensor<F>,
    w_shape: &[usize],
    stride: usize,
) -> Tensor<F> {
    let (c_in, ksize) = (w_shape[1], w_shape[2]);
    let pad = ksize / 2;
    let xs = x.shape();
    let (h, w) = (xs[1], xs[2]);
    let gs = grad_out.shape();
    let (oh, ow) = (gs[1], gs[2]);
    let mut dw = Tensor::zeros(w_shape);
    let (gd, xd) = (grad_out.data(), x.data());
    let per_oc = c_in * ksize * ksize;
    par::for_each_chunk(dw.data_mut(), per_oc, |oc, dw_oc| {
        let g_plane = &gd[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..c_in {
            let x_plane = &xd[ic * h * w..(ic + 1) * h * w];
            for ky in 0..ksize {
                for kx in 0..ksize {
                    let dxk = kx as isize - pad as isize;
                    let mut acc = F::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            let (g_lo, x_lo) =
                                if dxk < 0 { ((-dxk) as usize, 0) } else { (0, dxk as usize) };
                            let span = (ow - g_lo).min(w - x_lo);
                            acc = acc + dot(&g_row[g_lo..g_lo + span], &x_row[x_lo..x_lo + span]);
                        } else {
                            for (ox, &g) in g_row.iter().enumerate() {
                                let ix = (ox * stride) as isize + dxk;
                                if ix >= 0 && (ix as usize) < w {
                                    acc = acc + g * x_row[ix as usize];
                                }
                            }
                        }
                    }
                    dw_oc[(ic * ksize + ky) * ksize + kx] = acc;
                }
            }
        }
    });
    dw
}

pub fn conv2d_bwd_bias<F: Scalar>(grad_out: &Tensor<F>) -> Tensor<F> {
    let gs = grad_out.shape();
    let (c_out, plane) = (gs[0], gs[1] * gs[2]);
    let mut db = Tensor::zeros(&[c_out]);
    for oc in 0..c_out {
        db.data_mut()[oc] = stable_sum(&grad_out.data()[oc * plane..(oc + 1) * plane]);
    }
    db
}

// ---------------------------------------------------------------------------
// upsample2x

/// Source taps for one output coordinate under half-pixel-center sampling
/// with edge clamping.
#[inline]
fn bilinear_taps(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / 2.0 - 0.5;
    let floor = src.floor();
    let t = src - floor;
    let i0 = (floor.max(0.0) as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    // When floor < 0 both taps clamp to index 0; keep weight consistent.
    if floor < 0.0 {
        (0, 0, 0.0)
    } else {
        (i0, i1, t)
    }
}

pub fn upsample2x<F: Scalar>(x: &Tensor<F>, mode: UpsampleMode) -> Result<Tensor<F>> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::shape(
            "upsample2x",
            format!("expected (C,H,W), got {xs:?}"),
        ));
    }
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample2x", "spatial extents must be >= 1".to_string()));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let xd = x.data();
    match mode {
        UpsampleMode::Nearest => {
            par::for_each_chunk(out.data_mut(), oh * ow, |ci, plane| {
                let x_plane = &xd[ci * h * w..(ci + 1) * h * w];
                for oy in 0..oh {
                    let row = &mut plane[oy * ow..(oy + 1) * ow];
                    let x_row = &x_plane[(oy / 2) * w..(oy / 2 + 1) * w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        *v = x_row[ox / 2];
                    }
                }
            });
        }
        UpsampleMode::Bilinear => {
            let ytaps: Vec<(usize, usize, f64)> = (0..oh).map(|i| bilinear_taps(i, h)).collect();
            let xtaps: Vec<(usize, usize, f64)> = (0..ow).map(|i| bilinear_taps(i, w)).collect();
            par::for_each_chunk(out.data_mut(), oh * ow, |ci, plane| {
                let x_plane = &xd[ci * h * w..(ci + 1) * h * w];
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    let r0 = &x_plane[y0 * w..y0 * w + w];
                    let r1 = &x_plane[y1 * w..y1 * w + w];
                    let (wy0, wy1) = (F::lit(1.0 - ty), F::lit(ty));
                    let row = &mut plane[oy * ow..(oy + 1) * ow];
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let (wx0, wx1) = (F::lit(1.0 - tx), F::lit(tx));
                        let top = wx0 * r0[x0] + wx1 * r0[x1];
                        let bot = wx0 * r1[x0] + wx1 * r1[x1];
                        row[ox] = wy0 * top + wy1 * bot;
                    }
                }
            });
        }
    }
    Ok(out)
}

pub fn upsample2x_bwd<F: Scalar>(grad_out: &Tensor<F>, in_shape: &[usize], mode: UpsampleMode) -> Tensor<F> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let gd = grad_out.data();
    let mut dx = Tensor::zeros(in_shape);
    match mode {
        UpsampleMode::Nearest => {
            par::for_each_chunk(dx.data_mut(), h * w, |ci, plane| {
                let g_plane = &gd[ci * oh * ow..(ci + 1) * oh * ow];
                for oy in 0..oh {
                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                    let d_row = &mut plane[(oy / 2) * w..(oy / 2 + 1) * w];
                    for (ox, &g) in g_row.iter().enumerate() {
                        d_row[ox / 2] = d_row[ox / 2] + g;
                    }
                }
            });
        }
        UpsampleMode::Bilinear => {
            let ytaps: Vec<(usize, usize, f64)> = (0..oh).map(|i| bilinear_taps(i, h)).collect();
            let xtaps: Vec<(usize, usize, f64)> = (0..ow).map(|i| bilinear_taps(i, w)).collect();
            par::for_each_chunk(dx.data_mut(), h * w, |ci, plane| {
                let g_plane = &gd[ci * oh * ow..(ci + 1) * oh * ow];
                for (oy, &(y0, y1, ty)) in ytaps.iter().enumerate() {
                    let (wy0, wy1) = (F::lit(1.0 - ty), F::lit(ty));
                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                    for (ox, &(x0, x1, tx)) in xtaps.iter().enumerate() {
                        let (wx0, wx1) = (F::lit(1.0 - tx), F::lit(tx));
                        let g = g_row[ox];
                        plane[y0 * w + x0] = plane[y0 * w + x0] + wy0 * wx0 * g;
                        plane[y0 * w + x1] = plane[y0 * w + x1] + wy0 * wx1 * g;
                        plane[y1 * w + x0] = plane[y1 * w + x0] + wy1 * wx0 * g;
                        plane[y1 * w + x1] = plane[y1 * w + x1] + wy1 * wx1 * g;
                    }
                }
            });
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// softmax / layer norm

/// Shift-invariant softmax along `axis`. Errors on non-finite input,
/// reporting the offending flat index.
pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} out of range for shape {:?}", x.shape()),
        ));
    }
    if let Some((index, value)) = x.first_non_finite() {
        return Err(Error::NonFinite {
            op: "softmax",
            index,
            value: value.as_f64(),
        });
    }
    let shape = x.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        let base = o * axis_len * inner;
        for i in 0..inner {
            let mut mx = F::neg_infinity();
            for a in 0..axis_len {
                mx = mx.max(d[base + a * inner + i]);
            }
            let mut sum = F::zero();
            for a in 0..axis_len {
                let idx = base + a * inner + i;
                let e = (d[idx] - mx).exp();
                d[idx] = e;
                sum = sum + e;
            }
            let inv = F::one() / sum;
            for a in 0..axis_len {
                d[base + a * inner + i] = d[base + a * inner + i] * inv;
            }
        }
    }
    Ok(out)
}

pub fn softmax_bwd<F: Scalar>(probs: &Tensor<F>, grad_out: &Tensor<F>, axis: usize) -> Tensor<F> {
    let shape = probs.shape();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut dx = Tensor::zeros(shape);
    let (pd, gd, dd) = (probs.data(), grad_out.data(), dx.data_mut());
    for o in 0..outer {
        let base = o * axis_len * inner;
        for i in 0..inner {
            let mut dotv = F::zero();
            for a in 0..axis_len {
                let idx = base + a * inner + i;
                dotv = dotv + gd[idx] * pd[idx];
            }
            for a in 0..axis_len {
                let idx = base + a * inner + i;
                dd[idx] = pd[idx] * (gd[idx] - dotv);
            }
        }
    }
    dx
}

/// Row-wise softmax of a 2-D tensor with disallowed entries forced to zero
/// probability (logits treated as negative infinity). Each row must have at
/// least one allowed entry.
pub fn masked_softmax_rows<F: Scalar>(x: &Tensor<F>, mask: &[bool]) -> Result<Tensor<F>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::shape(
            "masked_softmax",
            format!("expected rank-2 logits, got {shape:?}"),
        ));
    }
    if mask.len() != x.numel() {
        return Err(Error::shape(
            "masked_softmax",
            format!("mask length {} does not match logits {:?}", mask.len(), shape),
        ));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let mut out = x.clone();
    let d = out.data_mut();
    for r in 0..rows {
        let row = &mut d[r * cols..(r + 1) * cols];
        let mrow = &mask[r * cols..(r + 1) * cols];
        let mut mx = F::neg_infinity();
        for (v, &ok) in row.iter().zip(mrow) {
            if ok {
                mx = mx.max(*v);
            }
        }
        if mx == F::neg_infinity() {
            return Err(Error::numerical(
                "masked_softmax",
                format!("row {r} has no allowed entries"),
            ));
        }
        let mut sum = F::zero();
        for (v, &ok) in row.iter_mut().zip(mrow) {
            if ok {
                let e = (*v - mx).exp();
                *v = e;
                sum = sum + e;
            } else {
                *v = F::zero();
            }
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    Ok(out)
}

/// Normalize over the last axis, then apply the elementwise affine
/// `gamma * xhat + beta`.
pub fn layer_norm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> Result<Tensor<F>> {
    let shape = x.shape();
    let cols = *shape.last().ok_or_else(|| {
        Error::shape("layer_norm", "cannot normalize a rank-0 tensor".to_string())
    })?;
    if cols == 0 {
        return Err(Error::shape("layer_norm", "zero-length normalized axis".to_string()));
    }
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} must match normalized extent {cols}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::shape("layer_norm", format!("eps must be > 0, got {eps}")));
    }
    let rows = x.numel() / cols;
    let mut out = Tensor::zeros(shape);
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let od = out.data_mut();
    let inv_n = F::lit(1.0 / cols as f64);
    for r in 0..rows {
        let xr = &xd[r * cols..(r + 1) * cols];
        let or = &mut od[r * cols..(r + 1) * cols];
        let mean = stable_sum(xr) * inv_n;
        let mut var = F::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + F::lit(eps)).sqrt();
        for ((o, &v), (&g, &b)) in or.iter_mut().zip(xr).zip(gd.iter().zip(bd)) {
            *o = g * ((v - mean) * inv_std) + b;
        }
    }
    Ok(out)
}

pub struct LayerNormGrads<F> {
    pub dx: Tensor<F>,
    pub dgamma: Tensor<F>,
    pub dbeta: Tensor<F>,
}

pub fn layer_norm_bwd<F: Scalar>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    grad_out: &Tensor<F>,
    eps: f64,
) -> LayerNormGrads<F> {
    let shape = x.shape();
    let cols = *shape.last().unwrap();
    let rows = x.numel() / cols;
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(&[cols]);
    let mut dbeta = Tensor::zeros(&[cols]);
    let (xd, gd, god) = (x.data(), gamma.data(), grad_out.data());
    let inv_n = F::lit(1.0 / cols as f64);
    for r in 0..rows {
        let xr = &xd[r * cols..(r + 1) * cols];
        let gr = &god[r * cols..(r + 1) * cols];
        let mean = stable_sum(xr) * inv_n;
        let mut var = F::zero();
        for &v in xr {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = F::one() / (var + F::lit(eps)).sqrt();
        // xhat, then reductions of g*gamma and g*gamma*xhat.
        let mut sum_gg = F::zero();
        let mut sum_ggx = F::zero();
        for i in 0..cols {
            let xhat = (xr[i] - mean) * inv_std;
            let gg = gr[i] * gd[i];
            sum_gg = sum_gg + gg;
            sum_ggx = sum_ggx + gg * xhat;
            dgamma.data_mut()[i] += gr[i] * xhat;
            dbeta.data_mut()[i] += gr[i];
        }
        let mean_gg = sum_gg * inv_n;
        let mean_ggx = sum_ggx * inv_n;
        let dxr = &mut dx.data_mut()[r * cols..(r + 1) * cols];
        for i in 0..cols {
            let xhat = (xr[i] - mean) * inv_std;
            dxr[i] = (gr[i] * gd[i] - mean_gg - xhat * mean_ggx) * inv_std;
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

// ---------------------------------------------------------------------------
// prefix-masked scaled-dot attention

/// Plain rank-2 transpose.
pub fn transpose2<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("transpose2", format!("expected rank 2, got {s:?}")));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = Tensor::zeros(&[n, m]);
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..m {
        for j in 0..n {
            od[j * m + i] = xd[i * n + j];
        }
    }
    Ok(out)
}

fn check_plens(op: &'static str, plens: &[usize], tq: usize, tk: usize) -> Result<()> {
    if plens.len() != tq {
        return Err(Error::shape(
            op,
            format!("{} prefix lengths for {tq} query rows", plens.len()),
        ));
    }
    if let Some(&bad) = plens.iter().find(|&&p| p == 0 || p > tk) {
        return Err(Error::shape(
            op,
            format!("prefix length {bad} outside [1, {tk}]"),
        ));
    }
    Ok(())
}

/// Attention probabilities under a prefix mask: row `i` of the result is
/// `softmax(scale * q_i k_j^T)` over `j < plens[i]` and exactly zero beyond.
/// Entries outside the prefix are never read, so the result is bitwise
/// independent of masked-out keys. Equivalent to setting disallowed logits
/// to negative infinity before a row softmax.
pub fn attn_probs_prefix<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    scale: f64,
    plens: &[usize],
) -> Result<Tensor<F>> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::shape(
            "attn_probs",
            format!("expected q (Tq,d) and k (Tk,d), got {sq:?} x {sk:?}"),
        ));
    }
    let (tq, d, tk) = (sq[0], sq[1], sk[0]);
    check_plens("attn_probs", plens, tq, tk)?;
    let kt = transpose2(k)?; // (d, Tk): logits row i = sum_l q[i,l] * kt[l]
    let mut p = Tensor::zeros(&[tq, tk]);
    let (qd, ktd) = (q.data(), kt.data());
    par::for_each_chunk(p.data_mut(), tk, |i, row| {
        let plen = plens[i];
        let logits = &mut row[..plen];
        for l in 0..d {
            let coeff = F::lit(scale) * qd[i * d + l];
            axpy(logits, coeff, &ktd[l * tk..l * tk + plen]);
        }
        let mut mx = F::neg_infinity();
        for &v in logits.iter() {
            mx = mx.max(v);
        }
        for v in logits.iter_mut() {
            *v = (*v - mx).exp();
        }
        let inv = F::one() / stable_sum(logits);
        for v in logits.iter_mut() {
            *v = *v * inv;
        }
    });
    Ok(p)
}

pub struct AttnProbsGrads<F> {
    pub dq: Tensor<F>,
    pub dk: Tensor<F>,
}

/// Backward of [`attn_probs_prefix`]. Single sequential pass over query rows
/// with a per-row scratch so the full logit-gradient matrix is never
/// materialized.
pub fn attn_probs_prefix_bwd<F: Scalar>(
    probs: &Tensor<F>,
    grad_out: &Tensor<F>,
    q: &Tensor<F>,
    k: &Tensor<F>,
    scale: f64,
    plens: &[usize],
) -> AttnProbsGrads<F> {
    let shape = probs.shape();
    let (tq, tk) = (shape[0], shape[1]);
    let d = q.shape()[1];
    let mut dq = Tensor::zeros(&[tq, d]);
    let mut dk = Tensor::zeros(&[tk, d]);
    let (pd, gd, qd, kd) = (probs.data(), grad_out.data(), q.data(), k.data());
    let kt = transpose2(k).expect("shape checked"); // (d, Tk) for long dq dots
    let ktd = kt.data();
    // Logit gradients are built for a block of query rows at a time; dq
    // comes from long dots against k columns, dk from accumulation in
    // ascending query order. Sequential because every query row touches dk.
    let mut ds = vec![F::zero(); ROW_BLOCK * tk];
    let sc = F::lit(scale);
    let dqd = dq.data_mut();
    let dkd = dk.data_mut();
    for i0 in (0..tq).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(tq - i0);
        let mut max_plen = 0;
        for r in 0..rows {
            let i = i0 + r;
            let plen = plens[i];
            max_plen = max_plen.max(plen);
            let p_row = &pd[i * tk..i * tk + plen];
            let g_row = &gd[i * tk..i * tk + plen];
            let dotv = dot(p_row, g_row);
            let ds_row = &mut ds[r * tk..r * tk + plen];
            for j in 0..plen {
                ds_row[j] = sc * p_row[j] * (g_row[j] - dotv);
            }
            let dq_row = &mut dqd[i * d..(i + 1) * d];
            for (l, o) in dq_row.iter_mut().enumerate() {
                *o = dot(&ds[r * tk..r * tk + plen], &ktd[l * tk..l * tk + plen]);
            }
        }
        for j in 0..max_plen {
            let dk_row = &mut dkd[j * d..(j + 1) * d];
            for r in 0..rows {
                let i = i0 + r;
                if j < plens[i] {
                    axpy(dk_row, ds[r * tk + j], &qd[i * d..(i + 1) * d]);
                }
            }
        }
    }
    AttnProbsGrads { dq, dk }
}

/// `out_i = sum_{j < plens[i]} p[i,j] * v[j]`. With a prefix-masked `p`
/// this equals `p · v` but skips the all-zero tail of each row.
pub fn matmul_prefix<F: Scalar>(
    p: &Tensor<F>,
    v: &Tensor<F>,
    plens: &[usize],
) -> Result<Tensor<F>> {
    let (sp, sv) = (p.shape(), v.shape());
    if sp.len() != 2 || sv.len() != 2 || sp[1] != sv[0] {
        return Err(Error::shape(
            "matmul_prefix",
            format!("expected (Tq,Tk) x (Tk,d), got {sp:?} x {sv:?}"),
        ));
    }
    let (tq, tk, dv) = (sp[0], sp[1], sv[1]);
    check_plens("matmul_prefix", plens, tq, tk)?;
    // Long dots along each probs row against v columns: prefix rows are
    // contiguous, so this vectorizes over the prefix length.
    let vt = transpose2(v)?; // (dv, Tk)
    let mut out = Tensor::zeros(&[tq, dv]);
    let (pd, vtd) = (p.data(), vt.data());
    par::for_each_chunk(out.data_mut(), dv, |i, out_row| {
        let plen = plens[i];
        let p_row = &pd[i * tk..i * tk + plen];
        for (l, o) in out_row.iter_mut().enumerate() {
            *o = dot(p_row, &vtd[l * tk..l * tk + plen]);
        }
    });
    Ok(out)
}

pub struct MatmulPrefixGrads<F> {
    pub dp: Tensor<F>,
    pub dv: Tensor<F>,
}

pub fn matmul_prefix_bwd<F: Scalar>(
    p: &Tensor<F>,
    v: &Tensor<F>,
    grad_out: &Tensor<F>,
    plens: &[usize],
) -> MatmulPrefixGrads<F> {
    let (tq, tk) = (p.shape()[0], p.shape()[1]);
    let dv_cols = v.shape()[1];
    // dp row i over the prefix: sum_l grad_out[i,l] * v[:,l] via transposed v.
    let vt = transpose2(v).expect("shape checked");
    let mut dp = Tensor::zeros(&[tq, tk]);
    let (vtd, gd, pd) = (vt.data(), grad_out.data(), p.data());
    par::for_each_chunk(dp.data_mut(), tk, |i, dp_row| {
        let plen = plens[i];
        for l in 0..dv_cols {
            axpy(&mut dp_row[..plen], gd[i * dv_cols + l], &vtd[l * tk..l * tk + plen]);
        }
    });
    // dv accumulates over query rows in ascending order; blocks keep that
    // order while sharing each dv row across the block.
    let mut dv = Tensor::zeros(&[tk, dv_cols]);
    let dvd = dv.data_mut();
    for i0 in (0..tq).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(tq - i0);
        let max_plen = plens[i0..i0 + rows].iter().copied().max().unwrap_or(0);
        for j in 0..max_plen {
            let dv_row = &mut dvd[j * dv_cols..(j + 1) * dv_cols];
            for r in 0..rows {
                let i = i0 + r;
                if j < plens[i] {
                    axpy(dv_row, pd[i * tk + j], &gd[i * dv_cols..(i + 1) * dv_cols]);
                }
            }
        }
    }
    MatmulPrefixGrads { dp, dv }
}
