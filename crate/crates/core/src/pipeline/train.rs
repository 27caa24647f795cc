//! One optimization step: per-sample forward/backward passes on fresh
//! tapes, gradient accumulation in sample order, and an AdamW update.

use crate::error::{Error, Result};
use crate::mtbin::DepthMap;
use crate::numerics::{Graph, Scalar, Tensor};

use super::loss::si_log_total;
use super::model::Dar;
use super::optim::AdamW;

/// One training example: input image and ground-truth depth at the same
/// resolution.
#[derive(Debug, Clone)]
pub struct TrainSample<F: Scalar> {
    pub image: Tensor<F>,
    pub gt: DepthMap,
}

/// What a call to [`train_step`] did.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    /// Mean loss across the batch (value before the update).
    pub loss: f64,
    /// Learning rate applied by the optimizer.
    pub lr: f64,
}

/// Runs every sample through a fresh tape, accumulates parameter gradients
/// in sample order, averages them, and applies one optimizer update.
pub fn train_step<F: Scalar>(
    model: &mut Dar<F>,
    opt: &mut AdamW<F>,
    batch: &[TrainSample<F>],
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let steps = model.config().steps();
    let (d_min, d_max) = (model.config().d_min, model.config().d_max);
    let mut grads: Vec<Tensor<F>> = model
        .params()
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut total_loss = 0.0;

    for sample in batch {
        let mut g: Graph<F> = Graph::new();
        let fwd = model.forward(&mut g, &sample.image, steps)?;
        let loss = si_log_total(&mut g, &fwd, &sample.gt, d_min, d_max)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::numerical(
                "train_step",
                format!("non-finite loss {loss_value}"),
            ));
        }
        total_loss += loss_value;
        g.backward(loss)?;
        for (acc, &var) in grads.iter_mut().zip(&fwd.bound.ordered) {
            if let Some(grad) = g.grad(var) {
                for (a, &b) in acc.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
        }
    }

    let scale = F::lit(1.0 / batch.len() as f64);
    for grad in &mut grads {
        for v in grad.data_mut() {
            *v *= scale;
        }
    }
    for (i, grad) in grads.iter().enumerate() {
        if let Some((idx, v)) = grad.first_non_finite() {
            return Err(Error::numerical(
                "train_step",
                format!(
                    "non-finite gradient {} at index {idx} of {}",
                    v.as_f64(),
                    model.params().names()[i]
                ),
            ));
        }
    }

    let lr = opt.step(model.params_mut(), &grads)?;
    Ok(StepOutcome {
        loss: total_loss / batch.len() as f64,
        lr,
    })
}
