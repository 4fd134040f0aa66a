use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrKind {
    Cosine,
    Polynomial,
    Constant,
}

/// Learning rate as a function of the global step, with optional linear
/// warmup from zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_lr: f64,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
}

fn default_power() -> f64 {
    0.9
}

impl LrSchedule {
    pub fn cosine(initial: f64, final_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: LrKind::Cosine,
            initial,
            final_lr,
            power: default_power(),
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn polynomial(initial: f64, power: f64, warmup_steps: usize, total_steps: usize) -> Self {
        LrSchedule {
            kind: LrKind::Polynomial,
            initial,
            final_lr: 0.0,
            power,
            warmup_steps,
            total_steps,
        }
    }

    pub fn constant(lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: LrKind::Constant,
            initial: lr,
            final_lr: lr,
            power: default_power(),
            warmup_steps: 0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.total_steps > 0
            && self.warmup_steps < self.total_steps
            && self.final_lr >= 0.0
            && self.initial >= self.final_lr
            && self.power > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond schedule length {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.initial * step as f64 / self.warmup_steps as f64);
        }
        let t = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(match self.kind {
            LrKind::Cosine => self.final_lr + (self.initial - self.final_lr) * (1.0 + (PI * t).cos()) / 2.0,
            LrKind::Polynomial => self.initial * (1.0 - t).powf(self.power),
            LrKind::Constant => self.initial,
        })
    }
}
