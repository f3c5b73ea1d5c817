//! SGD with classical momentum, L2-in-gradient weight decay, and a
//! step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer state over a flat parameter vector.
///
/// Update rule per step:
/// `v <- momentum * v + (g + weight_decay * w)`, then
/// `w <- w - lr * v`,
/// where `lr` is the base learning rate decayed by a factor of 10 every
/// `schedule_period` epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between successive factor-10 decays; `None` disables decay.
    pub schedule_period: Option<usize>,
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        schedule_period: Option<usize>,
        param_count: usize,
    ) -> Result<Self> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::parameter("learning rate must be nonnegative"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::parameter("momentum must lie in [0, 1)"));
        }
        if !weight_decay.is_finite() || weight_decay < 0.0 {
            return Err(Error::parameter("weight decay must be nonnegative"));
        }
        if schedule_period == Some(0) {
            return Err(Error::parameter("schedule period must be positive"));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            schedule_period,
            velocity: vec![0.0; param_count],
        })
    }

    /// Learning rate in effect at a given epoch.
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        match self.schedule_period {
            Some(period) => self.learning_rate * 0.1f64.powi((epoch / period) as i32),
            None => self.learning_rate,
        }
    }

    /// One update at epoch 0 (no schedule decay applied).
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_at_epoch(params, grads, 0)
    }

    /// One update with the schedule-decayed learning rate of `epoch`.
    pub fn step_at_epoch(&mut self, params: &mut [f64], grads: &[f64], epoch: usize) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::shape(format!(
                "sgd shapes disagree: params {}, grads {}, velocity {}",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        let lr = self.effective_lr(epoch);
        for ((w, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + (g + self.weight_decay * *w);
            *w -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut state = SgdState::new(0.0, 0.9, 1e-4, None, 3).unwrap();
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        state.step(&mut params, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn plain_step_matches_hand_update() {
        // momentum 0, wd 0, w = 1, g = 0.5, lr = 0.1 -> w = 0.95
        let mut state = SgdState::new(0.1, 0.0, 0.0, None, 1).unwrap();
        let mut params = vec![1.0];
        state.step(&mut params, &[0.5]).unwrap();
        assert!((params[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // Two steps, momentum 0.9, g = 1, lr = 1, w0 = 0:
        // v1 = 1, w1 = -1; v2 = 0.9 + 1 = 1.9, w2 = -2.9.
        let mut state = SgdState::new(1.0, 0.9, 0.0, None, 1).unwrap();
        let mut params = vec![0.0];
        state.step(&mut params, &[1.0]).unwrap();
        assert!((params[0] + 1.0).abs() < 1e-15);
        state.step(&mut params, &[1.0]).unwrap();
        assert!((params[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        // v = g + wd * w = 0 + 0.5 * 2 = 1; w = 2 - 0.1 * 1 = 1.9
        let mut state = SgdState::new(0.1, 0.0, 0.5, None, 1).unwrap();
        let mut params = vec![2.0];
        state.step(&mut params, &[0.0]).unwrap();
        assert!((params[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_decays_by_ten_every_period() {
        let state = SgdState::new(0.1, 0.9, 0.0, Some(20), 1).unwrap();
        assert!((state.effective_lr(0) - 0.1).abs() < 1e-15);
        assert!((state.effective_lr(19) - 0.1).abs() < 1e-15);
        assert!((state.effective_lr(20) - 0.01).abs() < 1e-15);
        assert!((state.effective_lr(59) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = SgdState::new(0.1, 0.0, 0.0, None, 2).unwrap();
        let mut params = vec![0.0; 3];
        assert!(state.step(&mut params, &[0.0; 3]).is_err());
    }
}
