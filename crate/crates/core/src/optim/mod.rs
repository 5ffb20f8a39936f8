//! Optimizers with and without weight rollback.
//!
//! [`steps`] holds the per-layer update rules; [`Optimizer`] drives them over
//! a whole [`ModelParams`] for one of the fine-tuning [`Method`]s.

pub mod schedule;
pub mod steps;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::penalty::PenaltyConfig;

pub use schedule::{LrSchedule, ScheduleKind};
pub use steps::{
    adam_step, discrepancy_error, l2sp_step, olor_adam_step, olor_sgd_step, sgd_momentum_step,
    weight_decay_step, DISCREPANCY_TOLERANCE,
};

/// Optimizer underlying the non-rollback methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Every layer trains, no rollback.
    Full,
    /// Only layers without a pre-trained reference (the head) train.
    Linear,
    L2sp,
    OlorSgd,
    OlorAdam,
    /// Coupled weight decay on SGD.
    WdSgd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Full,
        Method::Linear,
        Method::L2sp,
        Method::OlorSgd,
        Method::OlorAdam,
        Method::WdSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::Linear => "linear",
            Method::L2sp => "l2sp",
            Method::OlorSgd => "olor-sgd",
            Method::OlorAdam => "olor-adam",
            Method::WdSgd => "wd-sgd",
        }
    }

    /// The optimizer actually stepping the weights.
    pub fn host(self, configured: HostOptimizer) -> HostOptimizer {
        match self {
            Method::OlorSgd | Method::WdSgd => HostOptimizer::Sgd,
            Method::OlorAdam => HostOptimizer::Adam,
            Method::Full | Method::Linear | Method::L2sp => configured,
        }
    }

    pub fn is_olor(self) -> bool {
        matches!(self, Method::OlorSgd | Method::OlorAdam)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub host: HostOptimizer,
    pub base_lr: f64,
    /// SGD momentum factor β.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub l2sp_alpha: f64,
    /// Multiplier on the learning rate of layers without a pre-trained
    /// reference.
    pub head_lr_scale: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            host: HostOptimizer::Adam,
            base_lr: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            l2sp_alpha: 0.0,
            head_lr_scale: 1.0,
            max_grad_norm: None,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("momentum", self.momentum)?;
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.l2sp_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "l2sp_alpha must be >= 0, got {}",
                self.l2sp_alpha
            )));
        }
        if !(self.head_lr_scale >= 0.0) {
            return Err(Error::Config(format!(
                "head_lr_scale must be >= 0, got {}",
                self.head_lr_scale
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Moment buffers and tracked discrepancy for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub d: Vec<f64>,
}

impl LayerState {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            d: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub layers: Vec<LayerState>,
}

impl OptimizerState {
    pub fn for_model(model: &ModelParams) -> Self {
        Self {
            t: 0,
            layers: model.layers.iter().map(|l| LayerState::zeros(l.len())).collect(),
        }
    }

    /// Largest relative deviation between the tracked `d` and `θ − θ₀` over
    /// all anchored layers.
    pub fn audit(&self, model: &ModelParams) -> f64 {
        model
            .layers
            .iter()
            .zip(&self.layers)
            .map(|(l, s)| discrepancy_error(l, s))
            .fold(0.0, f64::max)
    }
}

/// Result of one global step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub t: u64,
    pub lr: f64,
    /// Effective rollback per layer (0 for layers without rollback).
    pub rho: Vec<f64>,
}

/// Drives one fine-tuning method over a whole model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub method: Method,
    pub hyper: HyperParams,
    pub penalty: PenaltyConfig,
    pub state: OptimizerState,
    stored_lambda: Vec<f64>,
}

impl Optimizer {
    pub fn new(
        method: Method,
        hyper: HyperParams,
        penalty: PenaltyConfig,
        model: &ModelParams,
    ) -> Result<Self> {
        hyper.validate()?;
        penalty.validate()?;
        if penalty.n != model.n {
            return Err(Error::Config(format!(
                "penalty depth normaliser {} differs from model's {}",
                penalty.n, model.n
            )));
        }
        let stored_lambda = if method.is_olor() {
            model
                .layers
                .iter()
                .map(|l| penalty.layer_penalty(l.layer_index, l.has_pretrained()))
                .collect::<Result<_>>()?
        } else {
            vec![0.0; model.layers.len()]
        };
        Ok(Self {
            method,
            hyper,
            penalty,
            state: OptimizerState::for_model(model),
            stored_lambda,
        })
    }

    pub fn stored_lambda(&self) -> &[f64] {
        &self.stored_lambda
    }

    /// Advances `t`, then updates every layer with learning rate `lr_t`.
    pub fn step(
        &mut self,
        model: &mut ModelParams,
        grads: &mut [Vec<f64>],
        lr_t: f64,
    ) -> Result<StepReport> {
        if grads.len() != model.layers.len() || self.state.layers.len() != model.layers.len() {
            return Err(Error::shape("per-layer gradients", model.layers.len(), grads.len()));
        }
        if let Some(max_norm) = self.hyper.max_grad_norm {
            clip_global_norm(grads, max_norm);
        }

        self.state.t += 1;
        let t = self.state.t;
        let hyper = self.hyper;
        let host = self.method.host(hyper.host);
        let mut rho = vec![0.0; model.layers.len()];

        for (k, ((layer, state), grad)) in model
            .layers
            .iter_mut()
            .zip(self.state.layers.iter_mut())
            .zip(grads.iter())
            .enumerate()
        {
            let anchored = layer.has_pretrained();
            let lr = if anchored { lr_t } else { lr_t * hyper.head_lr_scale };
            match (self.method, anchored) {
                (Method::Linear, true) => {}
                (Method::OlorSgd, _) => {
                    rho[k] = olor_sgd_step(&hyper, t, state, layer, grad, lr, self.stored_lambda[k])?;
                }
                (Method::OlorAdam, _) => {
                    rho[k] = olor_adam_step(&hyper, t, state, layer, grad, lr, self.stored_lambda[k])?;
                }
                (Method::WdSgd, _) => {
                    weight_decay_step(&hyper, state, layer, grad, lr, hyper.weight_decay)?
                }
                (Method::L2sp, true) => {
                    l2sp_step(&hyper, host, t, state, layer, grad, lr, hyper.l2sp_alpha)?
                }
                (Method::Full | Method::Linear | Method::L2sp, _) => match host {
                    HostOptimizer::Sgd => sgd_momentum_step(&hyper, state, layer, grad, lr)?,
                    HostOptimizer::Adam => adam_step(&hyper, t, state, layer, grad, lr)?,
                },
            }
            if layer.values.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer `{}`", layer.name)));
            }
        }
        Ok(StepReport { t, lr: lr_t, rho })
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads
            .iter_mut()
            .flat_map(|g| g.iter_mut())
            .for_each(|g| *g *= scale);
    }
}
