//! AdamW with decoupled weight decay and a warmup-then-linear-decay
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

use super::params::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    /// Peak learning rate reached at the end of warmup.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    /// Fraction of `total_iters` spent ramping linearly from zero.
    pub warmup_frac: f64,
    /// Planned optimizer steps; the learning rate reaches zero here.
    pub total_iters: usize,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64, total_iters: usize) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            warmup_frac: 0.1,
            total_iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup fraction {} must lie in [0, 1)",
                self.warmup_frac
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Learning rate applied at 0-based step `t`: linear warmup over the
    /// first `warmup_frac` of the run, then linear decay to zero.
    pub fn lr_at(&self, t: usize) -> f64 {
        let warmup = ((self.total_iters as f64 * self.warmup_frac).ceil() as usize)
            .min(self.total_iters.saturating_sub(1));
        if t < warmup {
            self.lr * (t + 1) as f64 / warmup as f64
        } else {
            let rest = (self.total_iters - warmup) as f64;
            let done = (t - warmup) as f64;
            self.lr * (1.0 - done / rest).max(0.0)
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor, in
/// [`ParamStore`] order.
pub struct AdamW<F: Scalar> {
    cfg: AdamWConfig,
    t: usize,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<F>) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            t: 0,
            m: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Completed optimizer steps.
    pub fn iterations(&self) -> usize {
        self.t
    }

    /// Applies one update in place. `grads` must match the store layout.
    /// Returns the learning rate that was used.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Tensor<F>]) -> Result<f64> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            ));
        }
        let lr = self.cfg.lr_at(self.t);
        self.t += 1;
        let b1 = F::lit(self.cfg.beta1);
        let b2 = F::lit(self.cfg.beta2);
        let one = F::one();
        let corr1 = F::lit(1.0 - self.cfg.beta1.powi(self.t as i32));
        let corr2 = F::lit(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = F::lit(self.cfg.eps);
        let lr_f = F::lit(lr);
        let decay = F::lit(lr * self.cfg.weight_decay);

        for (i, grad) in grads.iter().enumerate() {
            let p = &mut params.tensors_mut()[i];
            if grad.shape() != p.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!(
                        "gradient {i} shape {:?} vs parameter {:?}",
                        grad.shape(),
                        p.shape()
                    ),
                ));
            }
            let (md, vd) = (self.m[i].data_mut(), self.v[i].data_mut());
            let pd = p.data_mut();
            for ((pv, &gv), (mv, vv)) in
                pd.iter_mut().zip(grad.data()).zip(md.iter_mut().zip(vd.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let m_hat = *mv / corr1;
                let v_hat = *vv / corr2;
                *pv = *pv - lr_f * (m_hat / (v_hat.sqrt() + eps)) - decay * *pv;
            }
        }
        Ok(lr)
    }
}
