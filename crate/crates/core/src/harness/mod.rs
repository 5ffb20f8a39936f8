//! Desk-scale fine-tuning experiments.
//!
//! A run pre-trains an MLP on an upstream task, snapshots it as the rollback
//! anchor, swaps in a fresh head for the downstream task and fine-tunes with
//! one of the [`Method`]s while tracking upstream retention and weight
//! discrepancy.

mod defect;
mod metrics;
mod protocols;
mod train;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, Loss, MlpSpec};
use crate::optim::{HostOptimizer, HyperParams, LrSchedule, Method, ScheduleKind};
use crate::penalty::PenaltyConfig;
use crate::tasks::{derive_downstream, DomainShift, TaskSpec};

pub use defect::{delay_defect_scan, linspace, DefectCell, DefectScan};
pub use metrics::{MetricsLog, MetricsRecord, METRICS_FIXED_COLUMNS};
pub use protocols::{
    forgetting_test, sweep, write_rollback_csv, zero_shot_rollback, ForgettingReport, ForgettingRow, MethodSummary,
    RollbackRow, SweepCell, SweepReport, DEFAULT_GAMMA_GRID, DEFAULT_IOTA1_GRID,
};
pub use train::{finetune, pretrain, FinetuneOutcome, PretrainOutcome};

/// Default seed list for paired comparisons.
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Rollback levels and power; the depth normaliser and base rate come from
/// the model and optimizer settings of the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RollbackLevels {
    pub iota1: f64,
    pub iota2: f64,
    pub gamma: f64,
}

impl Default for RollbackLevels {
    fn default() -> Self {
        Self {
            iota1: 0.01,
            iota2: 0.0,
            gamma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub upstream: TaskSpec,
    pub downstream: TaskSpec,
    /// Network used for pre-training; its output size is the upstream class
    /// count.
    pub model: MlpSpec,
    pub method: Method,
    pub rollback: RollbackLevels,
    /// Fine-tuning optimizer settings. `hyper.host` also drives
    /// pre-training.
    pub hyper: HyperParams,
    pub schedule: ScheduleKind,
    pub floor_lr: f64,
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let upstream = TaskSpec::default();
        let downstream = derive_downstream(&upstream, DomainShift::default())
            .expect("default shift is valid");
        Self {
            model: MlpSpec {
                layer_sizes: vec![upstream.dim, 32, 32, 32, upstream.num_classes],
                activation: Activation::Tanh,
                loss: Loss::SoftmaxCrossEntropy,
            },
            upstream,
            downstream,
            method: Method::OlorAdam,
            rollback: RollbackLevels::default(),
            hyper: HyperParams {
                host: HostOptimizer::Adam,
                base_lr: 1e-3,
                ..HyperParams::default()
            },
            schedule: ScheduleKind::Cosine,
            floor_lr: 0.0,
            pretrain_lr: 1e-2,
            pretrain_epochs: 100,
            epochs: 30,
            batch_size: 32,
            seed: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.upstream.validate()?;
        self.downstream.validate()?;
        self.model.validate()?;
        self.hyper.validate()?;
        if self.model.inputs() != self.upstream.dim || self.upstream.dim != self.downstream.dim {
            return Err(Error::Config(format!(
                "model input width {} must equal task dimension (upstream {}, downstream {})",
                self.model.inputs(),
                self.upstream.dim,
                self.downstream.dim
            )));
        }
        if self.model.outputs() != self.upstream.num_classes {
            return Err(Error::Config(format!(
                "model output width {} must equal upstream class count {}",
                self.model.outputs(),
                self.upstream.num_classes
            )));
        }
        if self.model.loss != Loss::SoftmaxCrossEntropy {
            return Err(Error::Config("classification runs need softmax-cross-entropy".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.pretrain_lr > 0.0 && self.pretrain_lr.is_finite()) {
            return Err(Error::Config(format!(
                "pretrain_lr must be > 0, got {}",
                self.pretrain_lr
            )));
        }
        self.penalty()?;
        self.finetune_schedule(1)?;
        Ok(())
    }

    pub fn penalty(&self) -> Result<PenaltyConfig> {
        PenaltyConfig::new(
            self.rollback.iota1,
            self.rollback.iota2,
            self.rollback.gamma,
            self.model.depth(),
            self.hyper.base_lr,
        )
    }

    pub fn finetune_schedule(&self, total_steps: u64) -> Result<LrSchedule> {
        LrSchedule::new(self.schedule, self.hyper.base_lr, total_steps, self.floor_lr)
    }

    /// The same run with method `full` on the optimizer this run's method
    /// uses, so that zero rollback reproduces it exactly.
    pub fn full_baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.hyper.host = self.method.host(self.hyper.host);
        cfg.method = Method::Full;
        cfg
    }

    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    /// Upstream/downstream pair with the downstream rotated by `rotation`
    /// radians relative to the upstream.
    pub fn with_shift(&self, shift: DomainShift) -> Result<Self> {
        Ok(Self {
            downstream: derive_downstream(&self.upstream, shift)?,
            ..self.clone()
        })
    }
}

/// Default rotation between upstream and downstream class centres.
pub const DEFAULT_ROTATION: f64 = PI / 4.0;

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
