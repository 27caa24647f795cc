//! Multiway tree bins: per-pixel coarse-to-fine depth discretization.
//!
//! Each pixel carries `N` contiguous depth bins spanning its current
//! candidate range. A step predicts a distribution over the bins, the depth
//! estimate is the probability-weighted mean of bin centers, and the next
//! step re-splits a window around the chosen bin — the chosen bin expanded
//! by one neighbor on each side, so an estimate that was off by up to one
//! bin width still has the true depth inside the refined range — into `N`
//! finer bins. Ranges therefore contract by a factor of at most `3/N` per
//! step while every pixel follows its own decision path.
//!
//! All bin arithmetic is `f64` regardless of the training precision; bin
//! indices are 0-based throughout (`t` in `0..N`).

use crate::error::{Error, Result};
use crate::numerics::{kernels, Tensor};
use crate::par;

/// Depth interval and bin count shared by a whole model run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRangeConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
}

impl DepthRangeConfig {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        let cfg = DepthRangeConfig { d_min, d_max, n_bins };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.d_min < self.d_max) {
            return Err(Error::Config(format!(
                "depth range requires d_min < d_max, got [{}, {}]",
                self.d_min, self.d_max
            )));
        }
        if self.n_bins < 2 {
            return Err(Error::Config(format!(
                "need at least 2 bins, got {}",
                self.n_bins
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.d_max - self.d_min
    }
}

/// Per-pixel metric depth with a validity mask. Invalid pixels are excluded
/// from every loss and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    h: usize,
    w: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depth.len() != h * w || valid.len() != h * w {
            return Err(Error::shape(
                "depth_map",
                format!(
                    "{}x{} map needs {} entries, got depth {} / valid {}",
                    h,
                    w,
                    h * w,
                    depth.len(),
                    valid.len()
                ),
            ));
        }
        Ok(DepthMap { h, w, depth, valid })
    }

    /// Fully valid map from raw depths.
    pub fn full_valid(h: usize, w: usize, depth: Vec<f64>) -> Result<Self> {
        let valid = vec![true; depth.len()];
        DepthMap::new(h, w, depth, valid)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn depth_mut(&mut self) -> &mut [f64] {
        &mut self.depth
    }

    pub fn valid_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Flat pixel index for (row, col).
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.w + col
    }

    /// Bilinear 2x upsample of the depth channel; the result is fully valid.
    /// Intended for predicted maps (which carry no invalid pixels), not for
    /// ground truth.
    pub fn upsample2x(&self) -> Result<DepthMap> {
        let t = Tensor::from_vec(&[1, self.h, self.w], self.depth.clone())?;
        let up = kernels::upsample2x(&t, kernels::UpsampleMode::Bilinear)?;
        DepthMap::full_valid(2 * self.h, 2 * self.w, up.into_data())
    }
}

/// Per-pixel bin boundaries at one refinement step.
///
/// Boundaries are stored pixel-major: pixel `p` owns
/// `bounds[p*(N+1) .. (p+1)*(N+1)]`, strictly ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct BinState {
    n_bins: usize,
    h: usize,
    w: usize,
    /// Refinement step this state belongs to, starting at 1 for the initial
    /// uniform split.
    step: usize,
    bounds: Vec<f64>,
}

impl BinState {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn n_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Boundary slice (length N+1) of one pixel.
    pub fn bounds_at(&self, px: usize) -> &[f64] {
        let n1 = self.n_bins + 1;
        &self.bounds[px * n1..(px + 1) * n1]
    }

    /// Single-pixel state from explicit boundaries (mainly for tests and
    /// traces).
    pub fn single(bounds: Vec<f64>, step: usize) -> Result<Self> {
        if bounds.len() < 3 {
            return Err(Error::Config(format!(
                "need at least 3 boundaries, got {}",
                bounds.len()
            )));
        }
        if !bounds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "boundaries must be strictly ascending: {bounds:?}"
            )));
        }
        Ok(BinState {
            n_bins: bounds.len() - 1,
            h: 1,
            w: 1,
            step,
            bounds,
        })
    }

    /// Widest per-pixel range in the state.
    pub fn max_range_width(&self) -> f64 {
        let n1 = self.n_bins + 1;
        self.bounds
            .chunks_exact(n1)
            .map(|b| b[self.n_bins] - b[0])
            .fold(0.0, f64::max)
    }

    /// Bin centers as an `(N, h, w)` channel map.
    pub fn centers_map(&self) -> Tensor<f64> {
        let (n, px) = (self.n_bins, self.h * self.w);
        let n1 = n + 1;
        let mut out = Tensor::zeros(&[n, self.h, self.w]);
        let od = out.data_mut();
        for p in 0..px {
            let b = &self.bounds[p * n1..(p + 1) * n1];
            for i in 0..n {
                od[i * px + p] = 0.5 * (b[i] + b[i + 1]);
            }
        }
        out
    }

    /// Bilinear 2x upsample of every boundary channel, then a per-pixel sort
    /// to restore monotonicity. Convex interpolation of ascending channels
    /// already preserves order, so the sort is a safeguard against rounding.
    pub fn upsample2x(&self) -> Result<BinState> {
        let n1 = self.n_bins + 1;
        let px = self.h * self.w;
        // Channel-major layout for the resampling kernel.
        let mut chan = Tensor::zeros(&[n1, self.h, self.w]);
        {
            let cd = chan.data_mut();
            for p in 0..px {
                for i in 0..n1 {
                    cd[i * px + p] = self.bounds[p * n1 + i];
                }
            }
        }
        let up = kernels::upsample2x(&chan, kernels::UpsampleMode::Bilinear)?;
        let (oh, ow) = (2 * self.h, 2 * self.w);
        let opx = oh * ow;
        let ud = up.data();
        let mut bounds = vec![0.0; opx * n1];
        par::for_each_chunk(&mut bounds, n1, |p, slot| {
            for i in 0..n1 {
                slot[i] = ud[i * opx + p];
            }
            slot.sort_by(|a, b| a.partial_cmp(b).expect("finite boundaries"));
        });
        Ok(BinState {
            n_bins: self.n_bins,
            h: oh,
            w: ow,
            step: self.step,
            bounds,
        })
    }
}

/// Uniform split of one range into `n` bins. `lo + i*(span/n)` with the last
/// boundary pinned exactly to `hi`; the multiplicative form (not running
/// accumulation) is part of the format so independent implementations agree
/// bitwise.
fn uniform_bounds_into(lo: f64, hi: f64, n: usize, out: &mut [f64]) {
    let w = (hi - lo) / n as f64;
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = lo + i as f64 * w;
    }
    out[n] = hi;
}

/// Initial state: every pixel spans the full configured range, split into
/// `N` equal bins.
pub fn init_bins(cfg: &DepthRangeConfig, h: usize, w: usize) -> Result<BinState> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("empty bin grid {h}x{w}")));
    }
    let n1 = cfg.n_bins + 1;
    let mut proto = vec![0.0; n1];
    uniform_bounds_into(cfg.d_min, cfg.d_max, cfg.n_bins, &mut proto);
    let mut bounds = Vec::with_capacity(h * w * n1);
    for _ in 0..h * w {
        bounds.extend_from_slice(&proto);
    }
    Ok(BinState {
        n_bins: cfg.n_bins,
        h,
        w,
        step: 1,
        bounds,
    })
}

/// Bin index (0-based) containing `d` within one pixel's boundaries.
/// `d` is clamped into the pixel's range first; bins are half-open
/// `[b_i, b_{i+1})` with the last bin closed on the right.
pub fn locate_px(bounds: &[f64], d: f64) -> usize {
    let n = bounds.len() - 1;
    let d = d.clamp(bounds[0], bounds[n]);
    let t = bounds.partition_point(|&b| b <= d);
    // partition_point is at least 1 after the left clamp.
    (t - 1).min(n - 1)
}

/// Per-pixel [`locate_px`] over a whole map. `depth` must match the state's
/// grid; validity is ignored (bins exist for every pixel).
pub fn locate_bin(state: &BinState, depth: &DepthMap) -> Result<Vec<usize>> {
    if depth.height() != state.h || depth.width() != state.w {
        return Err(Error::shape(
            "locate_bin",
            format!(
                "depth {}x{} vs bins {}x{}",
                depth.height(),
                depth.width(),
                state.h,
                state.w
            ),
        ));
    }
    let n1 = state.n_bins + 1;
    Ok(par::map_indexed(state.n_pixels(), |p| {
        locate_px(&state.bounds[p * n1..(p + 1) * n1], depth.depth()[p])
    }))
}

/// Refined boundaries for one pixel: the window from one bin left of `t` to
/// one bin right (indices clamped into range) re-split into `n` uniform
/// bins.
pub fn refine_px(bounds: &[f64], t: usize, out: &mut [f64]) {
    let n = bounds.len() - 1;
    debug_assert!(t < n, "bin index {t} out of range for {n} bins");
    let lo = bounds[t.saturating_sub(1)];
    let hi = bounds[(t + 2).min(n)];
    uniform_bounds_into(lo, hi, n, out);
}

/// Per-pixel refinement step. `t[p]` is pixel `p`'s located bin.
pub fn refine_bins(state: &BinState, t: &[usize]) -> Result<BinState> {
    if t.len() != state.n_pixels() {
        return Err(Error::shape(
            "refine_bins",
            format!("{} bin indices for {} pixels", t.len(), state.n_pixels()),
        ));
    }
    if let Some(&bad) = t.iter().find(|&&i| i >= state.n_bins) {
        return Err(Error::shape(
            "refine_bins",
            format!("bin index {bad} out of range for {} bins", state.n_bins),
        ));
    }
    let n1 = state.n_bins + 1;
    let mut bounds = vec![0.0; state.bounds.len()];
    par::for_each_chunk(&mut bounds, n1, |p, out| {
        refine_px(&state.bounds[p * n1..(p + 1) * n1], t[p], out);
    });
    Ok(BinState {
        n_bins: state.n_bins,
        h: state.h,
        w: state.w,
        step: state.step + 1,
        bounds,
    })
}

/// Brute-force reference for [`refine_bins`], written directly from the
/// definition with no shared refinement code: clamp the window indices,
/// then enumerate every candidate boundary of the uniform grid over the
/// window. Uses the same canonical `lo + i*(span/n)` expression so results
/// must match bitwise.
pub fn oracle_refine(state: &BinState, t: &[usize]) -> Result<BinState> {
    if t.len() != state.n_pixels() {
        return Err(Error::shape(
            "oracle_refine",
            format!("{} bin indices for {} pixels", t.len(), state.n_pixels()),
        ));
    }
    let n = state.n_bins;
    let n1 = n + 1;
    let mut bounds = Vec::with_capacity(state.bounds.len());
    for p in 0..state.n_pixels() {
        let b = &state.bounds[p * n1..(p + 1) * n1];
        // Window [left, right] in boundary indices, per the definition:
        // one bin below t and one above, clamped into the existing range.
        let left = if t[p] >= 1 { t[p] - 1 } else { 0 };
        let right = if t[p] + 2 <= n { t[p] + 2 } else { n };
        let (lo, hi) = (b[left], b[right]);
        for i in 0..n1 {
            let cand = if i == n {
                hi
            } else {
                lo + i as f64 * ((hi - lo) / n as f64)
            };
            bounds.push(cand);
        }
    }
    Ok(BinState {
        n_bins: n,
        h: state.h,
        w: state.w,
        step: state.step + 1,
        bounds,
    })
}

/// Centers of one pixel's bins: midpoints of adjacent boundaries.
pub fn centers_px(bounds: &[f64]) -> Vec<f64> {
    bounds.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Bin centers for every pixel as an `(N, h, w)` map.
pub fn bin_centers(state: &BinState) -> Tensor<f64> {
    state.centers_map()
}

/// Probability-weighted mean of centers for one pixel. Validates that the
/// probabilities are a distribution (nonnegative, sum within `1e-6` of 1).
pub fn compose_px(centers: &[f64], probs: &[f64]) -> Result<f64> {
    if centers.len() != probs.len() {
        return Err(Error::shape(
            "compose_depth",
            format!("{} centers vs {} probabilities", centers.len(), probs.len()),
        ));
    }
    let mut sum = 0.0;
    let mut acc = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&c, &p) in centers.iter().zip(probs) {
        if !(p >= 0.0) {
            return Err(Error::numerical(
                "compose_depth",
                format!("negative probability {p}"),
            ));
        }
        sum += p;
        acc += c * p;
        lo = lo.min(c);
        hi = hi.max(c);
    }
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::numerical(
            "compose_depth",
            format!("probabilities sum to {sum}, expected 1"),
        ));
    }
    Ok(acc.clamp(lo, hi))
}

/// Per-pixel depth composition over `(N, h, w)` center and probability
/// maps. The result is fully valid.
pub fn compose_depth(centers: &Tensor<f64>, probs: &Tensor<f64>) -> Result<DepthMap> {
    if centers.shape() != probs.shape() || centers.rank() != 3 {
        return Err(Error::shape(
            "compose_depth",
            format!(
                "expected matching (N,h,w) maps, got {:?} and {:?}",
                centers.shape(),
                probs.shape()
            ),
        ));
    }
    let (n, h, w) = (centers.shape()[0], centers.shape()[1], centers.shape()[2]);
    let px = h * w;
    let (cd, pd) = (centers.data(), probs.data());
    let mut depth = vec![0.0; px];
    let mut failure: Option<Error> = None;
    for (p, slot) in depth.iter_mut().enumerate() {
        let c: Vec<f64> = (0..n).map(|i| cd[i * px + p]).collect();
        let pr: Vec<f64> = (0..n).map(|i| pd[i * px + p]).collect();
        match compose_px(&c, &pr) {
            Ok(d) => *slot = d,
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    DepthMap::full_valid(h, w, depth)
}

/// One line of the refinement trace for a probed pixel: step, located bin,
/// composed depth, boundaries. Consumed by the `bins-trace` CLI command.
pub fn trace_line(step: usize, t: usize, depth: f64, bounds: &[f64]) -> String {
    let joined: Vec<String> = bounds.iter().map(|b| format!("{b:.6}")).collect();
    format!("k={step} t={t} depth={depth:.6} bounds={}", joined.join(","))
}
