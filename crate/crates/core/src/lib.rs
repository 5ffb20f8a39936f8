//! Weight-rollback ("one step learning, one step review") optimizers for
//! fine-tuning, with a layer-wise rollback schedule, baseline optimizers and
//! small synthetic experiments on knowledge forgetting.
//!
//! The rollback optimizers keep a running discrepancy `d = θ − θ₀` to the
//! pre-trained weights and blend every step back toward them:
//!
//! ```text
//! θ_t = θ_{t−1} − ρ·d_{t−1} − (1 − ρ)·u_t
//! d_t = (1 − ρ)·(d_{t−1} − u_t)
//! ```
//!
//! where `u_t` is the plain optimizer step and `ρ = η_t·λᵢ` the effective
//! rollback of layer `i`.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod penalty;
pub mod tasks;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use error::{Error, ErrorCategory, Result};
pub use harness::{MetricsLog, MetricsRecord, RollbackLevels, RunConfig};
pub use model::{grad_check_draw, shipped_specs, Activation, Batch, Loss, MlpSpec, Targets};
pub use optim::{
    HostOptimizer, HyperParams, LayerState, LrSchedule, Method, Optimizer, OptimizerState,
    ScheduleKind,
};
pub use params::{LayerParams, ModelParams};
pub use penalty::PenaltyConfig;
pub use tasks::{derive_downstream, generate, Dataset, DomainShift, Split, TaskKind, TaskSpec};
