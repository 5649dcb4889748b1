//! SGD with momentum and coupled weight decay, plus the polynomial
//! learning-rate schedule.

use crate::error::{GsError, Result};
use crate::tensor::Tensor;

/// Optimizer state: one velocity buffer per parameter, in parameter order.
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, params: &[Tensor]) -> Self {
        SgdState {
            learning_rate,
            momentum,
            weight_decay,
            step_count: 0,
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// v <- mu*v + (g + lambda*w); w <- w - lr*v; grads zeroed afterwards.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(GsError::State(format!(
                "optimizer built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, (p, v)) in params.iter().zip(self.velocity.iter_mut()).enumerate() {
            let grad = p.grad().ok_or_else(|| {
                GsError::State(format!("parameter {i} has no gradient before sgd step"))
            })?;
            if grad.len() != v.len() {
                return Err(GsError::State(format!(
                    "parameter {i}: velocity len {} vs grad len {}",
                    v.len(),
                    grad.len()
                )));
            }
            let (mu, lam, lr) = (self.momentum, self.weight_decay, self.learning_rate);
            p.map_data(|w| {
                for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(&grad) {
                    *vi = mu * *vi + (gi + lam * *wi);
                    *wi -= lr * *vi;
                }
            });
            p.zero_grad();
        }
        self.step_count += 1;
        Ok(())
    }
}

/// base_lr * (1 - step/total)^power, clamped to 0 past the end.
pub fn poly_lr(base_lr: f64, step: u64, total_steps: u64, power: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    base_lr * frac.powf(power)
}
