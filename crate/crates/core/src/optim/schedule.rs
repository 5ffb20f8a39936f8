use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    /// Half-cosine from the base rate at step 1 to the floor at step T.
    Cosine,
    /// Multiply by `factor` every `period` steps, never below the floor.
    StepDecay { period: u64, factor: f64 },
}

/// Learning rate as a function of the 1-based timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: u64,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base_lr: f64, total_steps: u64, floor_lr: f64) -> Result<Self> {
        let s = Self {
            kind,
            base_lr,
            total_steps,
            floor_lr,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(base_lr: f64, total_steps: u64) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base_lr,
            total_steps,
            floor_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..=self.base_lr).contains(&self.floor_lr) {
            return Err(Error::Config(format!(
                "floor_lr must lie in [0, base_lr], got {}",
                self.floor_lr
            )));
        }
        if let ScheduleKind::StepDecay { period, factor } = self.kind {
            if period == 0 {
                return Err(Error::Config("step-decay period must be >= 1".into()));
            }
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(Error::Config(format!(
                    "step-decay factor must lie in (0, 1], got {factor}"
                )));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::StepOutOfRange {
                t,
                total: self.total_steps,
            });
        }
        let (eta, floor) = (self.base_lr, self.floor_lr);
        Ok(match self.kind {
            ScheduleKind::Constant => eta,
            ScheduleKind::Cosine => {
                if t == 1 || self.total_steps == 1 {
                    eta
                } else if t == self.total_steps {
                    floor
                } else {
                    let progress = (t - 1) as f64 / (self.total_steps - 1) as f64;
                    (floor + (eta - floor) * (1.0 + (PI * progress).cos()) / 2.0).clamp(floor, eta)
                }
            }
            ScheduleKind::StepDecay { period, factor } => {
                let k = (t - 1) / period;
                (eta * factor.powi(i32::try_from(k).unwrap_or(i32::MAX))).max(floor)
            }
        })
    }
}
