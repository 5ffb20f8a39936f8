//! Layer-wise rollback penalty.
//!
//! The raw rollback level of layer `i` decays with depth,
//!
//! ```text
//! f(i) = ι₂ + (1 − i/n)^γ · (ι₁ − ι₂)
//! ```
//!
//! so the shallowest layer is pulled back hardest (`ι₁`) and the layer at
//! depth `n` the least (`ι₂`). The optimizers store `λᵢ = f(i) / η` and apply
//! `ρ = η_t · λᵢ` at each step, which makes `ρ = f(i)` whenever the scheduled
//! rate equals the base rate `η`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rounding band around 1 inside which `ρ` is taken to be exactly 1.
/// Products like `η · (1/η)` can land an ulp either side of 1.
pub const RHO_ROUNDING_SLACK: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Maximum rollback level, applied at depth 0.
    pub iota1: f64,
    /// Minimum rollback level, applied at depth `n`.
    pub iota2: f64,
    /// Rollback power shaping the decay across depth.
    pub gamma: f64,
    pub n: usize,
    /// Base learning rate the stored penalty is divided by.
    pub base_lr: f64,
}

impl PenaltyConfig {
    pub fn new(iota1: f64, iota2: f64, gamma: f64, n: usize, base_lr: f64) -> Result<Self> {
        let cfg = Self {
            iota1,
            iota2,
            gamma,
            n,
            base_lr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// No rollback at any depth.
    pub fn disabled(n: usize, base_lr: f64) -> Self {
        Self {
            iota1: 0.0,
            iota2: 0.0,
            gamma: 1.0,
            n,
            base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            iota1,
            iota2,
            gamma,
            n,
            base_lr,
        } = *self;
        if !(0.0..=1.0).contains(&iota1) || !(0.0..=1.0).contains(&iota2) {
            return Err(Error::Config(format!(
                "rollback levels must lie in [0, 1] (iota1 = {iota1}, iota2 = {iota2})"
            )));
        }
        if iota1 < iota2 {
            return Err(Error::Config(format!(
                "constraint iota1 >= iota2 violated (iota1 = {iota1}, iota2 = {iota2})"
            )));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
        }
        if n == 0 {
            return Err(Error::Config("depth normaliser n must be >= 1".into()));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {base_lr}")));
        }
        Ok(())
    }

    pub fn raw_penalty(&self, i: usize) -> Result<f64> {
        if i > self.n {
            return Err(Error::LayerIndexOutOfRange {
                index: i,
                n: self.n,
            });
        }
        let weight = (1.0 - i as f64 / self.n as f64).powf(self.gamma);
        if weight == 1.0 {
            // ι₂ + (ι₁ − ι₂) need not round back to ι₁.
            return Ok(self.iota1);
        }
        Ok((self.iota2 + weight * (self.iota1 - self.iota2)).min(self.iota1))
    }

    /// `λᵢ = f(i) / η`, the per-layer factor the optimizer keeps.
    pub fn stored_penalty(&self, i: usize) -> Result<f64> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!(
                "base_lr must be > 0, got {}",
                self.base_lr
            )));
        }
        Ok(self.raw_penalty(i)? / self.base_lr)
    }

    /// Penalty for a concrete layer; layers without a pre-trained reference
    /// have nothing to roll back to.
    pub fn layer_penalty(&self, i: usize, anchored: bool) -> Result<f64> {
        if anchored {
            self.stored_penalty(i)
        } else {
            Ok(0.0)
        }
    }

    pub fn effective_rollback(&self, i: usize, lr_t: f64) -> Result<f64> {
        rollback_coefficient(lr_t, self.stored_penalty(i)?, 0, &format!("depth {i}"))
    }
}

/// `ρ = lr_t · λᵢ`, rejected when it exceeds 1 by more than rounding.
pub fn rollback_coefficient(lr_t: f64, stored_lambda: f64, step: u64, layer: &str) -> Result<f64> {
    if !(lr_t >= 0.0) || !lr_t.is_finite() {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr_t}")));
    }
    if !(stored_lambda >= 0.0) || !stored_lambda.is_finite() {
        return Err(Error::Config(format!(
            "stored penalty must be >= 0, got {stored_lambda}"
        )));
    }
    let rho = lr_t * stored_lambda;
    if rho > 1.0 + RHO_ROUNDING_SLACK {
        return Err(Error::ScheduleIncompatible {
            rho,
            step,
            layer: layer.to_string(),
        });
    }
    if (rho - 1.0).abs() <= RHO_ROUNDING_SLACK {
        return Ok(1.0);
    }
    Ok(rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(iota1: f64, iota2: f64, gamma: f64, n: usize, base_lr: f64) -> PenaltyConfig {
        PenaltyConfig::new(iota1, iota2, gamma, n, base_lr).unwrap()
    }

    #[test]
    fn boundary_values() {
        assert_eq!(cfg(0.1, 0.0, 1.0, 10, 0.1).raw_penalty(0).unwrap(), 0.1);
        assert_eq!(cfg(0.1, 0.0, 4.0, 10, 0.1).raw_penalty(10).unwrap(), 0.0);
    }

    #[test]
    fn cifar_row_midpoint() {
        // 5e-3 * 0.5^2
        let f = cfg(5e-3, 0.0, 2.0, 12, 1e-4).raw_penalty(6).unwrap();
        assert!((f - 1.25e-3).abs() < 1e-18, "{f}");
    }

    #[test]
    fn index_past_n_is_an_error() {
        assert!(matches!(
            cfg(0.1, 0.0, 1.0, 4, 0.1).raw_penalty(5),
            Err(Error::LayerIndexOutOfRange { index: 5, n: 4 })
        ));
    }

    #[test]
    fn stored_penalty_divides_by_base_lr() {
        assert_eq!(cfg(0.1, 0.0, 1.0, 10, 0.1).stored_penalty(0).unwrap(), 1.0);
        assert_eq!(cfg(0.0, 0.0, 1.0, 10, 0.3).stored_penalty(3).unwrap(), 0.0);
        let s = cfg(5e-3, 0.0, 1.0, 10, 1e-4).stored_penalty(0).unwrap();
        assert!((s - 50.0).abs() < 1e-12, "{s}");
        let mut bad = cfg(0.1, 0.0, 1.0, 10, 0.1);
        bad.base_lr = 0.0;
        assert!(matches!(bad.stored_penalty(0), Err(Error::Config(_))));
    }

    #[test]
    fn unanchored_layers_get_no_penalty() {
        let c = cfg(0.5, 0.1, 1.0, 3, 0.1);
        assert_eq!(c.layer_penalty(0, false).unwrap(), 0.0);
        assert_eq!(c.layer_penalty(0, true).unwrap(), 5.0);
    }

    #[test]
    fn effective_rollback_cases() {
        let c = cfg(0.1, 0.0, 1.0, 10, 0.2);
        assert_eq!(c.effective_rollback(0, 0.2).unwrap(), 0.1);
        assert_eq!(c.effective_rollback(0, 0.0).unwrap(), 0.0);
        let half = c.effective_rollback(0, 0.1).unwrap();
        assert!((half - 0.05).abs() < 1e-15);
        let full = cfg(1.0, 0.0, 1.0, 10, 0.2);
        assert!(matches!(
            full.effective_rollback(0, 0.4),
            Err(Error::ScheduleIncompatible { .. })
        ));
    }

    #[test]
    fn validation_messages_name_constraint() {
        let err = PenaltyConfig::new(0.1, 0.2, 1.0, 3, 0.1).unwrap_err();
        assert!(err.to_string().contains("iota1 >= iota2"));
        assert!(PenaltyConfig::new(0.1, 0.0, 0.0, 3, 0.1).is_err());
        assert!(PenaltyConfig::new(1.5, 0.0, 1.0, 3, 0.1).is_err());
        assert!(PenaltyConfig::new(0.1, 0.0, 1.0, 0, 0.1).is_err());
    }

    fn config() -> impl Strategy<Value = PenaltyConfig> {
        (0.0f64..=1.0, 0.0f64..=1.0, 0.05f64..8.0, 1usize..64, 1e-6f64..1.0).prop_map(
            |(a, b, gamma, n, base_lr)| PenaltyConfig {
                iota1: a.max(b),
                iota2: a.min(b),
                gamma,
                n,
                base_lr,
            },
        )
    }

    proptest! {
        #[test]
        fn scale_cancels_at_base_lr(c in config(), frac in 0.0f64..=1.0) {
            let i = (frac * c.n as f64) as usize;
            let rho = c.effective_rollback(i, c.base_lr).unwrap();
            let f = c.raw_penalty(i).unwrap();
            prop_assert!((rho - f).abs() <= 4.0 * f64::EPSILON * f.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn penalty_stays_within_levels(c in config(), frac in 0.0f64..=1.0) {
            let i = (frac * c.n as f64) as usize;
            let f = c.raw_penalty(i).unwrap();
            prop_assert!(f >= c.iota2 && f <= c.iota1);
        }
    }
}
