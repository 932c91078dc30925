//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::scalar::Float;
use crate::tensor::Tensor;

/// Hyper-parameters plus moment estimates for every parameter slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    /// Zeroed moments shaped like `params`; betas (0.9, 0.999), epsilon 1e-8.
    pub fn new(params: &[Tensor<T>], learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    fn check(&self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len()
            || params.len() != self.first_moment.len()
            || params.len() != self.second_moment.len()
        {
            return Err(NumericsError::Invalid {
                op: "adam_step",
                message: format!(
                    "{} params, {} grads, {}/{} moment slots",
                    params.len(),
                    grads.len(),
                    self.first_moment.len(),
                    self.second_moment.len()
                ),
            });
        }
        for (i, p) in params.iter().enumerate() {
            for other in [&grads[i], &self.first_moment[i], &self.second_moment[i]] {
                if other.shape() != p.shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "adam_step",
                        left: p.shape().to_vec(),
                        right: other.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. The decay term `weight_decay * param` is
/// added to each gradient before the moment updates.
pub fn adam_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let b1 = T::cast_from(state.beta1);
    let b2 = T::cast_from(state.beta2);
    let one = T::one();
    let correction1 = T::cast_from(1.0 - state.beta1.powi(state.step as i32));
    let correction2 = T::cast_from(1.0 - state.beta2.powi(state.step as i32));
    let lr = T::cast_from(state.learning_rate);
    let wd = T::cast_from(state.weight_decay);
    let eps = T::cast_from(state.epsilon);

    for (i, param) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g + wd * *p;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
