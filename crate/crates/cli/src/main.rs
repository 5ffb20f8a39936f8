mod commands;
mod config;
mod error;
mod presets;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use olor_core::Method;

use crate::config::Overrides;
use crate::error::{CliError, CliResult};

/// Fine-tuning with layer-wise weight rollback on synthetic tasks.
#[derive(Debug, Parser)]
#[command(name = "olor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre-train on the upstream task and save the anchor checkpoint.
    Pretrain(Common),
    /// Fine-tune on the downstream task from a pre-trained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; pre-trains first when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare methods on downstream accuracy, upstream retention and
    /// weight discrepancy over paired seeds.
    ForgettingTest(Common),
    /// Interpolate fine-tuned weights back to the pre-trained ones and track
    /// upstream accuracy.
    Rollback(Common),
    /// Fine-tune over a grid of rollback levels and powers.
    Sweep(Common),
    /// Scan where coupled weight decay moves a weight away from zero.
    DelayDefect(Common),
    /// Compare analytic gradients with finite differences.
    GradCheck(Common),
    /// List the built-in presets.
    Presets,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed to run; repeat for several.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory created by a previous run.
    #[arg(long)]
    overwrite: bool,
    /// Named rollback preset.
    #[arg(long)]
    preset: Option<String>,
    /// Fine-tuning method.
    #[arg(long)]
    method: Option<Method>,
    /// Worker threads for independent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset.clone(),
            method: self.method,
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            jobs: self.jobs,
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let (name, common) = match &cli.command {
        Command::Presets => {
            let mut stdout = std::io::stdout().lock();
            for p in presets::PRESETS {
                let r = p.rollback;
                let line = writeln!(
                    stdout,
                    "{:<26} {:<9} iota1={} iota2={} gamma={}",
                    p.name,
                    p.method(),
                    r.iota1,
                    r.iota2,
                    r.gamma
                );
                if line.is_err() {
                    break;
                }
            }
            return Ok(());
        }
        Command::Pretrain(c) => ("pretrain", c),
        Command::Finetune { common, .. } => ("finetune", common),
        Command::ForgettingTest(c) => ("forgetting-test", c),
        Command::Rollback(c) => ("rollback", c),
        Command::Sweep(c) => ("sweep", c),
        Command::DelayDefect(c) => ("delay-defect", c),
        Command::GradCheck(c) => ("grad-check", c),
    };
    let res = config::load(common.config.as_deref(), &common.overrides())?;
    if let Some(jobs) = res.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Io {
                path: PathBuf::from("<thread pool>"),
                source: std::io::Error::other(e),
            })?;
    }
    let summary = match &cli.command {
        Command::Pretrain(_) => commands::run(name, &res, common.overwrite, commands::pretrain),
        Command::Finetune { checkpoint, .. } => commands::run(name, &res, common.overwrite, |r, o| {
            commands::finetune(r, o, checkpoint.as_deref())
        }),
        Command::ForgettingTest(_) => commands::run(name, &res, common.overwrite, commands::forgetting),
        Command::Rollback(_) => commands::run(name, &res, common.overwrite, commands::rollback),
        Command::Sweep(_) => commands::run(name, &res, common.overwrite, commands::sweep),
        Command::DelayDefect(_) => commands::run(name, &res, common.overwrite, commands::delay_defect),
        Command::GradCheck(_) => commands::run(name, &res, common.overwrite, commands::grad_check),
        Command::Presets => unreachable!("handled above"),
    }?;
    println!("{}", summary.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
