use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use olor_core::harness::{
    self, delay_defect_scan, forgetting_test, write_rollback_csv, zero_shot_rollback, DEFAULT_SEEDS,
};
use olor_core::{generate, grad_check_draw, load_checkpoint, save_checkpoint, shipped_specs, Checkpoint};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Resolved;
use crate::error::{CliError, CliResult};

/// Marker written into every output directory; `--overwrite` only clears
/// directories that carry it (or are empty).
pub const RUN_MARKER: &str = ".olor-run";

/// Exclusive handle on a run's output directory.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn prepare(root: &Path, overwrite: bool) -> CliResult<Self> {
        if root.exists() {
            if !overwrite {
                return Err(CliError::OutputExists(root.to_path_buf()));
            }
            let is_empty = fs::read_dir(root)
                .map_err(|e| CliError::io(root, e))?
                .next()
                .is_none();
            if !is_empty && !root.join(RUN_MARKER).is_file() {
                return Err(CliError::io(
                    root,
                    std::io::Error::other("refusing to overwrite a directory this tool did not create"),
                ));
            }
            fs::remove_dir_all(root).map_err(|e| CliError::io(root, e))?;
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let out = Self {
            root: root.to_path_buf(),
        };
        out.write(RUN_MARKER, b"")?;
        Ok(out)
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        let dir = self.path(rel);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(dir)
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> CliResult<()> {
        write_file(&self.path(rel), bytes)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|()| w.flush()).map_err(|e| CliError::io(path, e))
}

fn to_json(value: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("summary types serialize");
    s.push(b'\n');
    s
}

fn seed_dir(out: &OutDir, seed: u64) -> CliResult<PathBuf> {
    out.subdir(format!("seed-{seed}"))
}

fn save(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    Ok(save_checkpoint(path, ckpt)?)
}

/// Shared driver: echoes the configuration, runs `body`, and writes the
/// summary with wall time.
pub fn run(
    command: &str,
    res: &Resolved,
    overwrite: bool,
    body: impl FnOnce(&Resolved, &OutDir) -> CliResult<Value>,
) -> CliResult<PathBuf> {
    let out = OutDir::prepare(&res.out, overwrite)?;
    out.write("config.json", &to_json(res))?;
    let start = Instant::now();
    let results = body(res, &out)?;
    let summary = json!({
        "command": command,
        "seeds": res.seeds,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "config": res,
        "results": results,
    });
    out.write("summary.json", &to_json(&summary))?;
    Ok(out.path("summary.json"))
}

pub fn pretrain(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let seeds = res.seeds_or(&[res.run.seed]);
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed)?;
            let pre = harness::pretrain(&res.run.with_seed(seed))?;
            write_with(&dir.join("metrics.csv"), |w| pre.log.write_csv(w))?;
            save(&dir.join("pretrained.ckpt"), &pre.checkpoint)?;
            Ok(json!({ "seed": seed, "upstream_acc": pre.upstream_acc, "final": pre.log.last() }))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Value::Array(rows))
}

pub fn finetune(res: &Resolved, out: &OutDir, checkpoint: Option<&Path>) -> CliResult<Value> {
    let seeds = res.seeds_or(&[res.run.seed]);
    let loaded = checkpoint.map(load_checkpoint).transpose()?;
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed)?;
            let cfg = res.run.with_seed(seed);
            let pre = match &loaded {
                Some(c) => c.clone(),
                None => {
                    let pre = harness::pretrain(&cfg)?;
                    write_with(&dir.join("pretrain_metrics.csv"), |w| pre.log.write_csv(w))?;
                    save(&dir.join("pretrained.ckpt"), &pre.checkpoint)?;
                    pre.checkpoint
                }
            };
            let ft = harness::finetune(&cfg, &pre)?;
            write_with(&dir.join("metrics.csv"), |w| ft.log.write_csv(w))?;
            save(&dir.join("finetuned.ckpt"), &ft.checkpoint)?;
            Ok(json!({ "seed": seed, "final": ft.final_record() }))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Value::Array(rows))
}

pub fn forgetting(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let seeds = res.seeds_or(&DEFAULT_SEEDS);
    let report = forgetting_test(&res.run, &res.methods, &seeds)?;
    write_with(&out.path("forgetting.csv"), |w| report.write_csv(w))?;
    write_with(&out.path("trajectories.csv"), |w| {
        writeln!(w, "method,seed,epoch,discrepancy,upstream_acc")?;
        for r in &report.rows {
            for (epoch, (d, u)) in r.discrepancy_trajectory.iter().zip(&r.upstream_trajectory).enumerate() {
                writeln!(w, "{},{},{epoch},{d},{u}", r.method, r.seed)?;
            }
        }
        Ok(())
    })?;
    Ok(json!({
        "pretrain_upstream_acc": report.pretrain_upstream_acc,
        "summaries": report.summaries,
    }))
}

pub fn rollback(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let seeds = res.seeds_or(&[res.run.seed]);
    let upstream = generate(&res.run.upstream)?;
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed)?;
            let cfg = res.run.with_seed(seed).with_method(res.rollback_method);
            let pre = harness::pretrain(&cfg)?;
            let ft = harness::finetune(&cfg, &pre.checkpoint)?;
            let rows = zero_shot_rollback(
                &cfg.model,
                &ft.checkpoint.model_params,
                &pre.checkpoint,
                res.rollback_steps,
                &upstream.valid,
            )?;
            write_with(&dir.join("rollback.csv"), |w| write_rollback_csv(&rows, w))?;
            save(&dir.join("pretrained.ckpt"), &pre.checkpoint)?;
            save(&dir.join("finetuned.ckpt"), &ft.checkpoint)?;
            Ok(json!({
                "seed": seed,
                "pretrain_upstream_acc": pre.upstream_acc,
                "first": rows.first(),
                "last": rows.last(),
            }))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Value::Array(rows))
}

pub fn sweep(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let seeds = res.seeds_or(&[res.run.seed]);
    let rows = seeds
        .iter()
        .map(|&seed| {
            let dir = seed_dir(out, seed)?;
            let report = harness::sweep(&res.run.with_seed(seed), &res.sweep_iota1, &res.sweep_gamma)?;
            write_with(&dir.join("sweep.csv"), |w| report.write_csv(w))?;
            let b = &report.baseline;
            write_with(&dir.join("sweep_baseline.csv"), |w| {
                writeln!(w, "method,downstream_acc,upstream_acc,discrepancy")?;
                writeln!(w, "full,{},{},{}", b.downstream_acc, b.upstream_acc, b.discrepancy)
            })?;
            Ok(json!({
                "seed": seed,
                "cells": report.cells.len(),
                "best": report.cells[report.best],
                "baseline": report.baseline,
            }))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Value::Array(rows))
}

pub fn delay_defect(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let g = &res.defect;
    let scan = delay_defect_scan(&g.eta_g.points(), &g.lambda.points(), &g.theta_prev.points())?;
    write_with(&out.path("defect.csv"), |w| scan.write_csv(w))?;
    if scan.disagreements > 0 {
        return Err(CliError::CheckFailed(format!(
            "{} cells disagree with the closed-form condition",
            scan.disagreements
        )));
    }
    Ok(json!({
        "cells": scan.cells.len(),
        "defect_cells": scan.defect_count(),
        "disagreements": scan.disagreements,
    }))
}

pub fn grad_check(res: &Resolved, out: &OutDir) -> CliResult<Value> {
    let gc = &res.grad_check;
    let mut specs = shipped_specs();
    specs.push(("run-model", res.run.model.clone()));
    let seeds = res.seeds_or(&[0]);
    let mut rows = Vec::new();
    for (name, spec) in &specs {
        for &seed in &seeds {
            for draw in 0..gc.draws as u64 {
                let draw_seed = seed.wrapping_mul(1_000_003).wrapping_add(draw);
                rows.push((*name, seed, draw, draw_seed, spec.clone()));
            }
        }
    }
    let errors = rows
        .par_iter()
        .map(|(_, _, _, draw_seed, spec)| grad_check_draw(spec, *draw_seed, gc.batch, gc.epsilon))
        .collect::<olor_core::Result<Vec<f64>>>()?;
    write_with(&out.path("grad_check.csv"), |w| {
        writeln!(w, "spec,seed,draw,max_rel_error,pass")?;
        for ((name, seed, draw, _, _), err) in rows.iter().zip(&errors) {
            writeln!(w, "{name},{seed},{draw},{err},{}", *err < gc.tolerance)?;
        }
        Ok(())
    })?;
    let worst = errors.iter().copied().fold(0.0, f64::max);
    let failures = errors.iter().filter(|&&e| !(e < gc.tolerance)).count();
    if failures > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failures} gradient checks exceeded tolerance {} (worst {worst:e})",
            gc.tolerance
        )));
    }
    Ok(json!({ "checks": errors.len(), "worst": worst, "tolerance": gc.tolerance }))
}
