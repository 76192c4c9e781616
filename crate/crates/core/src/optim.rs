//! Bias-corrected adaptive-moment updates with milestone learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs at which the effective learning rate is multiplied by
    /// `decay_factor` (cumulative).
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_epochs: vec![50, 75, 90],
            decay_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Input(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Input(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    /// Learning rate after applying every milestone at or before `epoch`
    /// (1-based epochs).
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(hits as i32)
    }
}

/// Step counter shared by all parameters of one model.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub epoch: usize,
}

/// One update over a set of parameters. Gradients are consumed as-is;
/// zero gradients leave parameters bit-identical.
pub fn adam_step<R: Real>(
    params: &mut [&mut Param<R>],
    config: &AdamConfig,
    state: &mut AdamState,
) {
    state.step += 1;
    let t = state.step as i32;
    let lr = R::from_f64(config.effective_lr(state.epoch));
    let b1 = R::from_f64(config.beta1);
    let b2 = R::from_f64(config.beta2);
    let eps = R::from_f64(config.eps);
    let bc1 = R::one() - b1.powi(t);
    let bc2 = R::one() - b2.powi(t);
    for param in params.iter_mut() {
        for i in 0..param.value.numel() {
            let g = param.grad.data()[i];
            let m = b1 * param.m.data()[i] + (R::one() - b1) * g;
            let v = b2 * param.v.data()[i] + (R::one() - b2) * g * g;
            param.m.data_mut()[i] = m;
            param.v.data_mut()[i] = v;
            let mhat = m / bc1;
            let vhat = v / bc2;
            param.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
