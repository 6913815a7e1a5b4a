//! SGD with momentum and a step-decay learning-rate schedule.
//!
//! Update rule: `v <- mu * v + (g + wd * p)`, then `p <- p - lr * v`.
//! The velocity accumulates raw gradients; the learning rate is applied at
//! the parameter update only.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> OptimState<T> {
    /// Zero velocities shaped like `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        let (velocity, shapes) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], p.shape().to_vec()))
            .unzip();
        OptimState {
            lr,
            momentum,
            weight_decay,
            velocity,
            shapes,
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Restores velocities, e.g. from a checkpoint. Shapes must match.
    pub fn set_velocity(&mut self, velocity: Vec<Vec<T>>) -> Result<()> {
        if velocity.len() != self.velocity.len() || velocity.iter().zip(&self.velocity).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::dim("velocity buffers do not match parameters"));
        }
        self.velocity = velocity;
        Ok(())
    }

    /// One update over all parameters, then clears their gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::dim(format!(
                "optimizer holds {} velocity buffers, got {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.shapes[i] {
                return Err(Error::dim(format!(
                    "parameter {i} has shape {:?}, velocity {:?}",
                    p.shape(),
                    self.shapes[i]
                )));
            }
            if p.grad().is_none() {
                return Err(Error::usage(format!("parameter {i} has no gradient")));
            }
        }
        let (lr, mu, wd) = (
            T::from_f64(self.lr),
            T::from_f64(self.momentum),
            T::from_f64(self.weight_decay),
        );
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().expect("checked above").to_vec();
            let data = p.data_mut();
            for ((x, vel), g) in data.iter_mut().zip(v.iter_mut()).zip(grad) {
                let g = if self.weight_decay != 0.0 { g + wd * *x } else { g };
                *vel = mu * *vel + g;
                *x = *x - lr * *vel;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// `lr(epoch) = initial_lr * decay_factor ^ floor(epoch / step_every)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub step_every: usize,
    pub total_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial_lr: 0.1,
            decay_factor: 0.1,
            step_every: 30,
            total_epochs: 100,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "initial_lr must be > 0, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.step_every == 0 || self.total_epochs == 0 {
            return Err(Error::Config("step_every and total_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::usage(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        // Repeated multiplication keeps decade values like 0.001 identical to
        // what a hand-written step schedule produces.
        let mut lr = self.initial_lr;
        for _ in 0..epoch / self.step_every {
            lr *= self.decay_factor;
        }
        Ok(lr)
    }
}
