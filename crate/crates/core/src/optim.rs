//! Adam with bias correction, decoupled weight decay, and the
//! inverse-square-root warmup schedule.

use crate::error::{Error, Result};

/// Shared Adam hyperparameters and the global step counter. Per-tensor
/// first/second moments live in [`AdamSlot`]s owned by the caller, so the
/// optimizer itself stays independent of how parameters are stored.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `lr * weight_decay * param`
    /// alongside the moment update; 0 disables it.
    pub weight_decay: f64,
    step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(n: usize) -> Self {
        AdamSlot { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0 }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once per optimizer step, before
    /// updating any tensor.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// In-place Adam update of one tensor. Bias correction uses the shared
    /// step counter, so all tensors in a step see the same correction.
    pub fn update(&self, param: &mut [f64], grad: &[f64], slot: &mut AdamSlot, lr: f64) -> Result<()> {
        if param.len() != grad.len() || slot.m.len() != param.len() || slot.v.len() != param.len() {
            return Err(Error::Shape(format!(
                "adam update: param {} / grad {} / state {} elements",
                param.len(),
                grad.len(),
                slot.m.len()
            )));
        }
        if self.step == 0 {
            return Err(Error::Config("adam update before begin_step".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            param[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * param[i]);
        }
        Ok(())
    }
}

/// Inverse-square-root schedule with linear warmup:
/// rate = scale * d^(-1/2) * min(step^(-1/2), step * warmup^(-3/2)).
pub fn lr_at(step: u64, noam_scale: f64, d_model: usize, warmup: u64) -> f64 {
    let s = step as f64;
    let w = warmup as f64;
    let ramp = (s * w.powf(-1.5)).min(s.powf(-0.5));
    noam_scale * (d_model as f64).powf(-0.5) * ramp
}
