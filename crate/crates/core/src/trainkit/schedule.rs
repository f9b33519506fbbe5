use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup followed by cosine decay to zero, in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    /// Warmup longer than the run is clamped to the run length.
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize) -> Result<Self> {
        if !(base_lr >= 0.0 && base_lr.is_finite()) {
            return Err(Error::Invalid(format!("base lr {base_lr} invalid")));
        }
        Ok(Self {
            base_lr,
            warmup_epochs: warmup_epochs.min(total_epochs),
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }
}

pub fn cosine_warmup_lr(step: usize, s: &Schedule) -> Result<f64> {
    let total = s.total_steps();
    if step > total {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total}")));
    }
    let warm = s.warmup_steps();
    if step < warm {
        return Ok(s.base_lr * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(s.base_lr);
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    Ok(0.5 * s.base_lr * (1.0 + (PI * t).cos()))
}
