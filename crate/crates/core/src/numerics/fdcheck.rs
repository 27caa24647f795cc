//! Central-difference verification of reverse-mode gradients.
//!
//! The checker re-evaluates a scalar function with each selected coordinate
//! bumped by ±h and compares `(f(x+h) - f(x-h)) / 2h` against the analytic
//! gradient. For large parameter groups a seeded subset of coordinates is
//! sampled so runtime stays bounded; sampling is deterministic per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::tensor::Tensor;

/// Relative-error denominator floor. Central differences on an `O(1)`-scale
/// function carry roundoff noise around `1e-9`; the floor keeps near-zero
/// gradient coordinates from amplifying that noise past any tolerance while
/// still bounding their absolute error at `floor * tol`.
pub const DEFAULT_DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct FdSettings {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Cap on checked coordinates per input tensor; `None` checks all.
    pub max_coords_per_input: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
    pub denom_floor: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        FdSettings {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_input: None,
            seed: 0,
            denom_floor: DEFAULT_DENOM_FLOOR,
        }
    }
}

/// Worst single coordinate seen during a check.
#[derive(Debug, Clone)]
pub struct FdWorst {
    /// Index into the `inputs` slice.
    pub input: usize,
    /// Flat coordinate within that input.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Max relative error within each input, index-aligned with `inputs`.
    pub per_input_max: Vec<f64>,
    pub worst: Option<FdWorst>,
    pub tol: f64,
}

impl FdReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn rel_err(a: f64, b: f64, denom_floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(denom_floor)
}

/// Checks `analytic` against central differences of `f` at `inputs`.
///
/// `f` must be a pure function of the given inputs (it is re-invoked with
/// perturbed copies). `analytic[i]` is the claimed gradient with respect to
/// `inputs[i]` and must match its shape.
pub fn finite_diff_check<E>(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    settings: &FdSettings,
    mut f: E,
) -> Result<FdReport>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    assert_eq!(
        inputs.len(),
        analytic.len(),
        "one analytic gradient per input"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = FdReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        per_input_max: vec![0.0; inputs.len()],
        worst: None,
        tol: settings.tol,
    };
    for (idx, grad) in analytic.iter().enumerate() {
        assert_eq!(
            grad.shape(),
            inputs[idx].shape(),
            "gradient shape must match input {idx}"
        );
        let numel = inputs[idx].numel();
        let coords: Vec<usize> = match settings.max_coords_per_input {
            Some(cap) if cap < numel => rand::seq::index::sample(&mut rng, numel, cap).into_vec(),
            _ => (0..numel).collect(),
        };
        for coord in coords {
            let base = inputs[idx].data()[coord];
            work[idx].data_mut()[coord] = base + settings.h;
            let plus = f(&work)?;
            work[idx].data_mut()[coord] = base - settings.h;
            let minus = f(&work)?;
            work[idx].data_mut()[coord] = base;
            let numeric = (plus - minus) / (2.0 * settings.h);
            let a = grad.data()[coord];
            let err = rel_err(a, numeric, settings.denom_floor);
            report.coords_checked += 1;
            if err > report.per_input_max[idx] {
                report.per_input_max[idx] = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(FdWorst {
                    input: idx,
                    coord,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Graph;

    fn sum_sq(xs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(xs[0].clone())?;
        let sq = g.mul(x, x)?;
        let loss = g.sum(sq)?;
        Ok(g.value(loss).data()[0])
    }

    fn sum_sq_grad(x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone()).unwrap();
        let sq = g.mul(v, v).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.grad(v).unwrap().clone()
    }

    #[test]
    fn sum_of_squares_passes_tight_tolerance() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.9]).unwrap();
        let grad = sum_sq_grad(&x);
        let settings = FdSettings {
            tol: 1e-6,
            ..FdSettings::default()
        };
        let report = finite_diff_check(&[x], &[grad], &settings, sum_sq).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.9]).unwrap();
        let corrupted = sum_sq_grad(&x).map(|v| v * 1.01);
        let report =
            finite_diff_check(&[x], &[corrupted], &FdSettings::default(), sum_sq).unwrap();
        assert!(!report.pass());
        let worst = report.worst.unwrap();
        assert!(worst.rel_err > 1e-3);
    }

    #[test]
    fn coordinate_sampling_is_deterministic_and_bounded() {
        let x = Tensor::from_vec(&[100], (0..100).map(|v| v as f64 * 0.01 - 0.5).collect())
            .unwrap();
        let grad = sum_sq_grad(&x);
        let settings = FdSettings {
            max_coords_per_input: Some(7),
            seed: 11,
            ..FdSettings::default()
        };
        let r1 = finite_diff_check(&[x.clone()], &[grad.clone()], &settings, sum_sq).unwrap();
        let r2 = finite_diff_check(&[x], &[grad], &settings, sum_sq).unwrap();
        assert_eq!(r1.coords_checked, 7);
        assert_eq!(r1.max_rel_err, r2.max_rel_err);
        assert!(r1.pass());
    }
}
