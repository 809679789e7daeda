//! Adam with bias correction, plus the cosine-annealing learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter first and second moment buffers for one parameter group.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn ensure(&mut self, params: &[&mut Tensor]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
    }
}

/// One Adam update over a parameter group. Gradients must already be
/// populated on every tensor; grads are left untouched (callers zero them).
pub fn adam_step(
    params: &mut [&mut Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    state.ensure(params);
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (idx, p) in params.iter_mut().enumerate() {
        let grad = p
            .grad()
            .ok_or_else(|| Error::Value(format!("adam_step: parameter {idx} has no gradient")))?
            .to_vec();
        let (m, v) = (&mut state.m[idx], &mut state.v[idx]);
        let vals = p.values_mut();
        for i in 0..vals.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            vals[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine-annealed learning rate: `lr0 * (1 + cos(pi * t / total)) / 2`,
/// decaying from `lr0` at t=0 toward 0 at t=total.
pub fn cosine_lr(lr0: f64, t: u64, total: u64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t.min(total)) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
