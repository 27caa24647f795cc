//! Scale-invariant logarithmic depth loss, applied to every step's
//! prediction after upsampling to the ground-truth resolution.
//!
//! For log-residuals `g_i = ln(pred_i) - ln(gt_i)` over the valid pixels,
//! one step contributes `alpha * sqrt(mean(g^2) - beta * mean(g)^2)`; the
//! total is the unweighted sum over steps. The inner expression is a
//! variance-like quantity and is clamped at zero before the square root to
//! absorb rounding on near-perfect predictions.

use crate::error::{Error, Result};
use crate::mtbin::DepthMap;
use crate::numerics::{Graph, Scalar, Tensor, Var};

use super::model::Forward;

pub const SILOG_ALPHA: f64 = 10.0;
pub const SILOG_BETA: f64 = 0.85;

fn check_gt(gt: &DepthMap) -> Result<usize> {
    let n_valid = gt.n_valid();
    if n_valid == 0 {
        return Err(Error::numerical(
            "si_log_loss",
            "ground truth has no valid pixels",
        ));
    }
    for (i, (&d, &v)) in gt.depth().iter().zip(gt.valid()).enumerate() {
        if v && d <= 0.0 {
            return Err(Error::numerical(
                "si_log_loss",
                format!("valid ground-truth pixel {i} has non-positive depth {d}"),
            ));
        }
    }
    Ok(n_valid)
}

/// Reference implementation on plain maps (no tape). `pred` must be fully
/// valid and is clamped into `[d_min, d_max]` before the logarithm.
pub fn si_log_pure(pred: &DepthMap, gt: &DepthMap, d_min: f64, d_max: f64) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "si_log_loss",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let n = check_gt(gt)? as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for ((&p, &d), &v) in pred.depth().iter().zip(gt.depth()).zip(gt.valid()) {
        if !v {
            continue;
        }
        let g = p.clamp(d_min, d_max).ln() - d.ln();
        sum += g;
        sum_sq += g * g;
    }
    let mean = sum / n;
    let inner = (sum_sq / n - SILOG_BETA * mean * mean).max(0.0);
    Ok(SILOG_ALPHA * inner.sqrt())
}

/// Taped single-step loss. `pred_full` is a `(1, H, W)` depth map variable
/// at the ground-truth resolution.
pub fn si_log_taped<F: Scalar>(
    g: &mut Graph<F>,
    pred_full: Var,
    gt: &DepthMap,
    d_min: f64,
    d_max: f64,
) -> Result<Var> {
    let shape = g.shape(pred_full).to_vec();
    if shape != [1, gt.height(), gt.width()] {
        return Err(Error::shape(
            "si_log_loss",
            format!(
                "prediction shape {shape:?} vs ground truth {}x{}",
                gt.height(),
                gt.width()
            ),
        ));
    }
    let n_valid = check_gt(gt)?;
    let inv_n = 1.0 / n_valid as f64;

    // Constants: validity mask and sanitized log ground truth (invalid
    // pixels are masked out, so their placeholder value never matters).
    let mask = Tensor::from_fn(&shape, |i| {
        if gt.valid()[i] {
            F::one()
        } else {
            F::zero()
        }
    });
    let ln_gt = Tensor::from_fn(&shape, |i| {
        if gt.valid()[i] {
            F::lit(gt.depth()[i].ln())
        } else {
            F::zero()
        }
    });
    let mask = g.constant(mask)?;
    let ln_gt = g.constant(ln_gt)?;

    let clamped = g.clamp(pred_full, d_min, d_max)?;
    let ln_p = g.ln(clamped)?;
    let diff = g.sub(ln_p, ln_gt)?;
    let resid = g.mul(diff, mask)?;
    let sq = g.mul(resid, resid)?;
    let sum_sq = g.sum(sq)?;
    let mean_sq = g.affine(sum_sq, inv_n, 0.0)?;
    let sum = g.sum(resid)?;
    let mean = g.affine(sum, inv_n, 0.0)?;
    let mean2 = g.mul(mean, mean)?;
    let scaled = g.affine(mean2, SILOG_BETA, 0.0)?;
    let inner = g.sub(mean_sq, scaled)?;
    let floored = g.clamp(inner, 0.0, f64::INFINITY)?;
    let root = g.sqrt(floored)?;
    g.affine(root, SILOG_ALPHA, 0.0)
}

/// Total loss of a forward pass: sum of per-step losses against one ground
/// truth at the input resolution.
pub fn si_log_total<F: Scalar>(
    g: &mut Graph<F>,
    fwd: &Forward,
    gt: &DepthMap,
    d_min: f64,
    d_max: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &pred in &fwd.step_full {
        let step = si_log_taped(g, pred, gt, d_min, d_max)?;
        total = Some(match total {
            None => step,
            Some(t) => g.add(t, step)?,
        });
    }
    total.ok_or_else(|| Error::Config("forward pass produced no steps".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(h: usize, w: usize, depth: Vec<f64>) -> DepthMap {
        DepthMap::full_valid(h, w, depth).unwrap()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let gt = map(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let loss = si_log_pure(&gt.clone(), &gt, 0.1, 10.0).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn constant_log_offset_hits_closed_form() {
        // pred = e * gt makes every residual exactly 1, so the loss is
        // alpha * sqrt(1 - beta) per step.
        let gt = map(2, 2, vec![0.5, 1.0, 1.5, 2.0]);
        let pred = map(2, 2, gt.depth().iter().map(|d| d * std::f64::consts::E).collect());
        let loss = si_log_pure(&pred, &gt, 0.01, 100.0).unwrap();
        let want = SILOG_ALPHA * (1.0 - SILOG_BETA).sqrt();
        assert!(
            (loss - want).abs() / want < 1e-12,
            "{loss} vs closed form {want}"
        );
    }

    #[test]
    fn taped_loss_matches_pure_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (4, 4);
            let gt_depth: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.2..9.0)).collect();
            let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.8)).collect();
            if !valid.iter().any(|&v| v) {
                continue;
            }
            let gt = DepthMap::new(h, w, gt_depth, valid).unwrap();
            let pred_depth: Vec<f64> =
                (0..h * w).map(|_| rng.random_range(0.2..9.0)).collect();
            let pred = map(h, w, pred_depth.clone());

            let pure = si_log_pure(&pred, &gt, 0.1, 10.0).unwrap();
            let mut g: Graph<f64> = Graph::new();
            let pv = g
                .leaf(Tensor::from_vec(&[1, h, w], pred_depth).unwrap())
                .unwrap();
            let lv = si_log_taped(&mut g, pv, &gt, 0.1, 10.0).unwrap();
            let taped = g.value(lv).data()[0];
            assert!(
                (pure - taped).abs() < 1e-12,
                "pure {pure} vs taped {taped}"
            );
        }
    }

    #[test]
    fn taped_loss_gradient_passes_finite_differences() {
        use crate::numerics::{finite_diff_check, FdSettings};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (3, 3);
        let gt_depth: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.5..8.0)).collect();
        let mut valid = vec![true; h * w];
        valid[4] = false;
        let gt = DepthMap::new(h, w, gt_depth, valid).unwrap();
        let pred = Tensor::from_vec(
            &[1, h, w],
            (0..h * w).map(|_| rng.random_range(0.5..8.0)).collect(),
        )
        .unwrap();

        let mut g: Graph<f64> = Graph::new();
        let pv = g.leaf(pred.clone()).unwrap();
        let loss = si_log_taped(&mut g, pv, &gt, 0.1, 10.0).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(pv).unwrap().clone();
        let gt2 = gt.clone();
        let report = finite_diff_check(
            &[pred],
            &[analytic],
            &FdSettings::default(),
            move |xs: &[Tensor<f64>]| {
                let mut g: Graph<f64> = Graph::new();
                let pv = g.leaf(xs[0].clone())?;
                let loss = si_log_taped(&mut g, pv, &gt2, 0.1, 10.0)?;
                Ok(g.value(loss).data()[0])
            },
        )
        .unwrap();
        assert!(report.pass(), "max rel err {:.3e}", report.max_rel_err);
        // The masked-out pixel must contribute no gradient.
        assert_eq!(g.grad(pv).unwrap().data()[4], 0.0);
    }

    #[test]
    fn loss_rejects_empty_or_bad_ground_truth() {
        let gt = DepthMap::new(1, 2, vec![1.0, 2.0], vec![false, false]).unwrap();
        let pred = map(1, 2, vec![1.0, 2.0]);
        assert!(si_log_pure(&pred, &gt, 0.1, 10.0).is_err());
        let gt = DepthMap::new(1, 2, vec![-1.0, 2.0], vec![true, true]).unwrap();
        assert!(si_log_pure(&pred, &gt, 0.1, 10.0).is_err());
        let small = map(1, 1, vec![1.0]);
        let gt = DepthMap::new(1, 2, vec![1.0, 2.0], vec![true, true]).unwrap();
        assert!(si_log_pure(&small, &gt, 0.1, 10.0).is_err());
    }

    #[test]
    fn scale_invariance_at_beta_one() {
        // With beta = 1 the measure would ignore global scale; at 0.85 a
        // pure scaling must change the loss by the residual mean term only.
        let gt = map(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let pred_a = map(1, 4, vec![1.1, 1.9, 3.2, 3.8]);
        let pred_b = map(1, 4, pred_a.depth().iter().map(|d| 2.0 * d).collect());
        let la = si_log_pure(&pred_a, &gt, 0.01, 100.0).unwrap();
        let lb = si_log_pure(&pred_b, &gt, 0.01, 100.0).unwrap();
        assert!(lb > la, "uniform scaling should still be penalized at beta<1");
    }
}
