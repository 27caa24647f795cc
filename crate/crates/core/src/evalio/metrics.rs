//! Standard monocular depth evaluation metrics.
//!
//! A ground-truth pixel counts iff it is marked valid and its depth lies
//! in `(0, d_max]`. All means run over those pixels only; an empty valid
//! set is an error, never a silent zero.

use crate::error::{Error, Result};
use crate::mtbin::DepthMap;

/// Column order of every metrics CSV this crate writes.
pub const CSV_HEADER: &str = "abs_rel,rmse,sq_rel,log10,rmse_log,delta1,delta2,delta3,n_valid";

/// Threshold base for the delta accuracies.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub sq_rel: f64,
    pub log10: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

impl DepthMetrics {
    /// One CSV row matching [`CSV_HEADER`].
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.abs_rel,
            self.rmse,
            self.sq_rel,
            self.log10,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.n_valid
        )
    }
}

/// Computes all metrics of `pred` against `gt`. `pred` must be strictly
/// positive wherever it is evaluated (log metrics); model predictions are
/// range-clamped and satisfy this by construction.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, d_max: f64) -> Result<DepthMetrics> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "metrics",
            format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    let mut n = 0usize;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut l10 = 0.0;
    let mut d1 = 0usize;
    let mut d2 = 0usize;
    let mut d3 = 0usize;
    let (t1, t2, t3) = (DELTA_BASE, DELTA_BASE * DELTA_BASE, DELTA_BASE * DELTA_BASE * DELTA_BASE);

    for (i, ((&p, &d), &v)) in pred.depth().iter().zip(gt.depth()).zip(gt.valid()).enumerate() {
        if !v || d <= 0.0 || d > d_max {
            continue;
        }
        if p <= 0.0 {
            return Err(Error::numerical(
                "metrics",
                format!("non-positive prediction {p} at valid pixel {i}"),
            ));
        }
        n += 1;
        let err = p - d;
        abs_rel += err.abs() / d;
        sq_rel += err * err / d;
        sq += err * err;
        let log_err = p.ln() - d.ln();
        sq_log += log_err * log_err;
        l10 += (p.log10() - d.log10()).abs();
        let ratio = (p / d).max(d / p);
        // Strict inequality: a ratio exactly at the threshold fails.
        if ratio < t1 {
            d1 += 1;
        }
        if ratio < t2 {
            d2 += 1;
        }
        if ratio < t3 {
            d3 += 1;
        }
    }
    if n == 0 {
        return Err(Error::numerical("metrics", "no valid ground-truth pixels"));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        rmse: (sq / nf).sqrt(),
        sq_rel: sq_rel / nf,
        log10: l10 / nf,
        rmse_log: (sq_log / nf).sqrt(),
        delta1: d1 as f64 / nf,
        delta2: d2 as f64 / nf,
        delta3: d3 as f64 / nf,
        n_valid: n,
    })
}

/// Unweighted mean of per-image metrics; `n_valid` is summed. This is the
/// aggregate reported for a dataset of scenes.
pub fn mean_metrics(per_image: &[DepthMetrics]) -> Result<DepthMetrics> {
    if per_image.is_empty() {
        return Err(Error::numerical("metrics", "no per-image metrics to average"));
    }
    let nf = per_image.len() as f64;
    Ok(DepthMetrics {
        abs_rel: per_image.iter().map(|m| m.abs_rel).sum::<f64>() / nf,
        rmse: per_image.iter().map(|m| m.rmse).sum::<f64>() / nf,
        sq_rel: per_image.iter().map(|m| m.sq_rel).sum::<f64>() / nf,
        log10: per_image.iter().map(|m| m.log10).sum::<f64>() / nf,
        rmse_log: per_image.iter().map(|m| m.rmse_log).sum::<f64>() / nf,
        delta1: per_image.iter().map(|m| m.delta1).sum::<f64>() / nf,
        delta2: per_image.iter().map(|m| m.delta2).sum::<f64>() / nf,
        delta3: per_image.iter().map(|m| m.delta3).sum::<f64>() / nf,
        n_valid: per_image.iter().map(|m| m.n_valid).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(depth: Vec<f64>) -> DepthMap {
        let n = depth.len();
        DepthMap::full_valid(1, n, depth).unwrap()
    }

    #[test]
    fn identical_maps_score_perfectly() {
        let gt = map(vec![1.0, 2.5, 7.0]);
        let m = compute_metrics(&gt.clone(), &gt, 10.0).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.sq_rel, 0.0);
        assert_eq!(m.log10, 0.0);
        assert_eq!(m.rmse_log, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert_eq!(m.n_valid, 3);
    }

    #[test]
    fn uniform_twenty_percent_error() {
        let gt = map(vec![1.0, 2.0, 4.0]);
        let pred = map(vec![1.2, 2.4, 4.8]);
        let m = compute_metrics(&pred, &gt, 10.0).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        // 1.2 < 1.25, so every pixel clears delta1.
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn doubling_fails_every_delta() {
        let gt = map(vec![1.0, 3.0]);
        let pred = map(vec![2.0, 6.0]);
        let m = compute_metrics(&pred, &gt, 10.0).unwrap();
        // 2 > 1.25^3 = 1.953125.
        assert_eq!((m.delta1, m.delta2, m.delta3), (0.0, 0.0, 0.0));
        assert!((m.abs_rel - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_threshold_is_strict() {
        let gt = map(vec![1.0]);
        let pred = map(vec![1.25]);
        let m = compute_metrics(&pred, &gt, 10.0).unwrap();
        assert_eq!(m.delta1, 0.0, "ratio exactly 1.25 must not pass");
        assert_eq!(m.delta2, 1.0);
    }

    #[test]
    fn validity_follows_range_rule() {
        // Valid flag set, but depth 0 and depth > d_max are both excluded.
        let gt = DepthMap::new(
            1,
            4,
            vec![0.0, 2.0, 11.0, 5.0],
            vec![true, true, true, false],
        )
        .unwrap();
        let pred = map(vec![1.0, 2.0, 1.0, 1.0]);
        let m = compute_metrics(&pred, &gt, 10.0).unwrap();
        assert_eq!(m.n_valid, 1);
        assert_eq!(m.abs_rel, 0.0);
    }

    #[test]
    fn empty_valid_set_errors() {
        let gt = DepthMap::new(1, 2, vec![0.0, 20.0], vec![true, true]).unwrap();
        let pred = map(vec![1.0, 1.0]);
        assert!(compute_metrics(&pred, &gt, 10.0).is_err());
    }

    #[test]
    fn deltas_are_monotone_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let gt = map((0..n).map(|_| rng.random_range(0.2..9.5)).collect());
            let pred = map((0..n).map(|_| rng.random_range(0.2..9.5)).collect());
            let m = compute_metrics(&pred, &gt, 10.0).unwrap();
            assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }
    }

    #[test]
    fn mean_averages_rates_and_sums_counts() {
        let a = compute_metrics(&map(vec![1.2]), &map(vec![1.0]), 10.0).unwrap();
        let b = compute_metrics(&map(vec![2.0, 2.0]), &map(vec![1.0, 1.0]), 10.0).unwrap();
        let m = mean_metrics(&[a, b]).unwrap();
        assert!((m.abs_rel - 0.6).abs() < 1e-12);
        assert_eq!(m.delta1, 0.5);
        assert_eq!(m.n_valid, 3);
        assert!(mean_metrics(&[]).is_err());
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let gt = map(vec![1.0, 2.0]);
        let m = compute_metrics(&gt.clone(), &gt, 10.0).unwrap();
        let row = m.to_csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert_eq!(
            CSV_HEADER,
            "abs_rel,rmse,sq_rel,log10,rmse_log,delta1,delta2,delta3,n_valid"
        );
    }
}
