use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::optim::Method;
use crate::params::ModelParams;
use crate::tasks::Split;

use super::metrics::MetricsLog;
use super::train::{finetune, head_layers, pretrain, with_head};
use super::{RollbackLevels, RunConfig};

/// Maximum rollback levels searched in the hyper-parameter sweep.
pub const DEFAULT_IOTA1_GRID: [f64; 9] = [0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0];
/// Rollback powers searched in the hyper-parameter sweep.
pub const DEFAULT_GAMMA_GRID: [f64; 3] = [1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub method: Method,
    pub seed: u64,
    pub downstream_acc: f64,
    pub upstream_acc: f64,
    pub discrepancy: f64,
    /// Anchored-layer discrepancy at every recorded step.
    pub discrepancy_trajectory: Vec<f64>,
    pub upstream_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_downstream_acc: f64,
    pub mean_upstream_acc: f64,
    pub mean_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub seeds: Vec<u64>,
    /// Upstream valid accuracy of each seed's pre-trained model.
    pub pretrain_upstream_acc: Vec<f64>,
    /// Ordered by seed, then by method.
    pub rows: Vec<ForgettingRow>,
    pub summaries: Vec<MethodSummary>,
}

impl ForgettingReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "method,seed,downstream_acc,upstream_acc,discrepancy")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.method, r.seed, r.downstream_acc, r.upstream_acc, r.discrepancy
            )?;
        }
        Ok(())
    }
}

/// Pre-trains once per seed, then fine-tunes every method from the same
/// checkpoint and reports downstream accuracy, upstream retention and
/// discrepancy.
pub fn forgetting_test(cfg: &RunConfig, methods: &[Method], seeds: &[u64]) -> Result<ForgettingReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config("forgetting test needs methods and seeds".into()));
    }
    let per_seed: Vec<(f64, Vec<ForgettingRow>)> = seeds
        .par_iter()
        .map(|&seed| {
            let base = cfg.with_seed(seed);
            let pre = pretrain(&base)?;
            let rows = methods
                .iter()
                .map(|&method| {
                    let out = finetune(&base.with_method(method), &pre.checkpoint)?;
                    let last = out.final_record();
                    Ok(ForgettingRow {
                        method,
                        seed,
                        downstream_acc: last.downstream_acc,
                        upstream_acc: last.upstream_acc,
                        discrepancy: last.discrepancy,
                        discrepancy_trajectory: out.log.records.iter().map(|r| r.discrepancy).collect(),
                        upstream_trajectory: out.log.records.iter().map(|r| r.upstream_acc).collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((pre.upstream_acc, rows))
        })
        .collect::<Result<_>>()?;

    let pretrain_upstream_acc = per_seed.iter().map(|(acc, _)| *acc).collect();
    let rows: Vec<ForgettingRow> = per_seed.into_iter().flat_map(|(_, r)| r).collect();
    let summaries = methods
        .iter()
        .map(|&method| {
            let mine: Vec<_> = rows.iter().filter(|r| r.method == method).collect();
            let mean = |f: fn(&ForgettingRow) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / mine.len() as f64;
            MethodSummary {
                method,
                mean_downstream_acc: mean(|r| r.downstream_acc),
                mean_upstream_acc: mean(|r| r.upstream_acc),
                mean_discrepancy: mean(|r| r.discrepancy),
            }
        })
        .collect();
    Ok(ForgettingReport {
        seeds: seeds.to_vec(),
        pretrain_upstream_acc,
        rows,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollbackRow {
    pub k: usize,
    /// `k / K`.
    pub fraction: f64,
    pub discrepancy: f64,
    pub upstream_acc: f64,
}

pub fn write_rollback_csv(rows: &[RollbackRow], mut out: impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "k,fraction,discrepancy,upstream_acc")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.k, r.fraction, r.discrepancy, r.upstream_acc)?;
    }
    Ok(())
}

/// Interpolates the fine-tuned backbone back to the pre-trained one in
/// `steps` equal steps, `θ_k = (1 − k/K)·θ_ft + (k/K)·θ₀`, and evaluates each
/// point on `upstream_eval` with the upstream head from `pretrained`.
///
/// Row 0 is the fine-tuned backbone and row `K` the pre-trained backbone,
/// both bit-exact.
pub fn zero_shot_rollback(
    upstream_spec: &MlpSpec,
    finetuned: &ModelParams,
    pretrained: &Checkpoint,
    steps: usize,
    upstream_eval: &Split,
) -> Result<Vec<RollbackRow>> {
    if steps == 0 {
        return Err(Error::Config("rollback needs at least one step".into()));
    }
    let base = &pretrained.model_params;
    if finetuned.layers.len() != base.layers.len() {
        return Err(Error::shape("rollback layer count", base.layers.len(), finetuned.layers.len()));
    }
    let backbone = base.layers.len() - 2;
    for (ft, pre) in finetuned.layers[..backbone].iter().zip(&base.layers[..backbone]) {
        if ft.len() != pre.len() {
            return Err(Error::shape(format!("rollback layer `{}`", ft.name), pre.len(), ft.len()));
        }
    }
    let head = head_layers(base);
    let batch = upstream_eval.batch();

    (0..=steps)
        .map(|k| {
            let a = k as f64 / steps as f64;
            let mut point = with_head(base, head);
            let mut sq = 0.0;
            for (dst, ft) in point.layers[..backbone].iter_mut().zip(&finetuned.layers) {
                for (theta, &t_ft) in dst.values.iter_mut().zip(&ft.values) {
                    let t0 = *theta;
                    *theta = (1.0 - a) * t_ft + a * t0;
                    sq += (*theta - t0) * (*theta - t0);
                }
            }
            Ok(RollbackRow {
                k,
                fraction: a,
                discrepancy: sq.sqrt(),
                upstream_acc: upstream_spec.accuracy(&point, &batch, &upstream_eval.labels)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub iota1: f64,
    pub gamma: f64,
    pub downstream_acc: f64,
    pub upstream_acc: f64,
    pub discrepancy: f64,
    #[serde(skip)]
    pub log: MetricsLog,
    #[serde(skip)]
    pub final_params: Option<ModelParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// Row-major over `iota1` then `gamma`.
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the highest downstream accuracy (first on ties).
    pub best: usize,
    /// The same fine-tune with method `full`.
    pub baseline: SweepCell,
}

impl SweepReport {
    pub fn write_csv(&self, mut out: impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "iota1,gamma,downstream_acc,upstream_acc,discrepancy")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{}",
                c.iota1, c.gamma, c.downstream_acc, c.upstream_acc, c.discrepancy
            )?;
        }
        Ok(())
    }
}

/// One fine-tune per `(ι₁, γ)` cell from a shared pre-trained checkpoint,
/// with `ι₂ = 0`, plus the full fine-tuning baseline on the same host
/// optimizer.
pub fn sweep(cfg: &RunConfig, iota1s: &[f64], gammas: &[f64]) -> Result<SweepReport> {
    if iota1s.is_empty() || gammas.is_empty() {
        return Err(Error::Config("sweep grid must be non-empty".into()));
    }
    if !cfg.method.is_olor() {
        return Err(Error::Config(format!(
            "sweep needs a rollback method, got `{}`",
            cfg.method
        )));
    }
    let pre = pretrain(cfg)?;
    let grid: Vec<(f64, f64)> = iota1s
        .iter()
        .flat_map(|&i| gammas.iter().map(move |&g| (i, g)))
        .collect();

    let run = |c: &RunConfig, iota1: f64, gamma: f64| -> Result<SweepCell> {
        let out = finetune(c, &pre.checkpoint)?;
        let last = out.final_record().clone();
        Ok(SweepCell {
            iota1,
            gamma,
            downstream_acc: last.downstream_acc,
            upstream_acc: last.upstream_acc,
            discrepancy: last.discrepancy,
            log: out.log,
            final_params: Some(out.checkpoint.model_params),
        })
    };

    let cells = grid
        .par_iter()
        .map(|&(iota1, gamma)| {
            let mut c = cfg.clone();
            c.rollback = RollbackLevels {
                iota1,
                iota2: 0.0,
                gamma,
            };
            run(&c, iota1, gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = run(&cfg.full_baseline(), 0.0, cfg.rollback.gamma)?;

    let best = cells
        .iter()
        .enumerate()
        .fold(0, |best, (i, c)| if c.downstream_acc > cells[best].downstream_acc { i } else { best });
    Ok(SweepReport {
        cells,
        best,
        baseline,
    })
}
