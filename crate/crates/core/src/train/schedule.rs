use crate::error::{Result, SvtrError};

/// Reference peak rate for `batch_size`: 5e-4 scaled by batch/2048.
pub fn peak_lr_for_batch(batch_size: usize) -> f64 {
    5e-4 * batch_size as f64 / 2048.0
}

/// Linear warm-up from 0 to `peak_lr`, then half-cosine down to 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr >= 0.0) || !peak_lr.is_finite() {
            return Err(SvtrError::Config(format!("peak lr {peak_lr} must be finite and non-negative")));
        }
        if total_steps <= warmup_steps {
            return Err(SvtrError::Config(format!(
                "total steps {total_steps} must exceed warm-up steps {warmup_steps}"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(SvtrError::Contract(format!("step {step} beyond schedule end {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}
