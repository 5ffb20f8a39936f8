//! TOML run configuration.
//!
//! Values are layered: built-in defaults, then the preset named in the file,
//! then explicit file keys, then command-line flags (a `--preset` flag is
//! applied after the file, so it wins over file rollback keys).

use std::fmt::Display;
use std::path::{Path, PathBuf};

use olor_core::harness::{linspace, RollbackLevels, DEFAULT_GAMMA_GRID, DEFAULT_IOTA1_GRID};
use olor_core::{
    derive_downstream, Activation, DomainShift, HostOptimizer, Method, PenaltyConfig, RunConfig, ScheduleKind,
    TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Diagnostic, DiagnosticKind};
use crate::presets;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub method: Option<Method>,
    /// Methods compared by `forgetting-test`.
    pub methods: Option<Vec<Method>>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub pretrain_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub rollback: Option<RollbackSection>,
    pub optimizer: Option<OptimizerSection>,
    pub schedule: Option<ScheduleSection>,
    pub model: Option<ModelSection>,
    pub task: Option<TaskSection>,
    pub shift: Option<ShiftSection>,
    pub sweep: Option<SweepSection>,
    pub rollback_eval: Option<RollbackEvalSection>,
    pub defect: Option<DefectSection>,
    pub grad_check: Option<GradCheckSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackSection {
    pub iota1: Option<f64>,
    pub iota2: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub host: Option<HostOptimizer>,
    pub base_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub weight_decay: Option<f64>,
    pub l2sp_alpha: Option<f64>,
    pub head_lr_scale: Option<f64>,
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleName {
    Constant,
    Cosine,
    StepDecay,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleName,
    pub period: Option<u64>,
    pub factor: Option<f64>,
    pub floor_lr: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub num_classes: Option<usize>,
    pub dim: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub radius: Option<f64>,
    pub spread: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSection {
    pub rotation: Option<f64>,
    pub offset: Option<f64>,
    pub remap_labels: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub iota1: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackEvalSection {
    pub steps: Option<usize>,
    pub method: Option<Method>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        linspace(self.min, self.max, self.count)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectSection {
    pub eta_g: Option<Grid>,
    pub lambda: Option<Grid>,
    pub theta_prev: Option<Grid>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    pub epsilon: Option<f64>,
    pub draws: Option<usize>,
    pub batch: Option<usize>,
    pub tolerance: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub preset: Option<String>,
    pub method: Option<Method>,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefectGrids {
    pub eta_g: Grid,
    pub lambda: Grid,
    pub theta_prev: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckSettings {
    pub epsilon: f64,
    pub draws: usize,
    pub batch: usize,
    pub tolerance: f64,
}

/// A fully layered and validated configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub preset: Option<String>,
    pub run: RunConfig,
    /// Explicit seed list, if any; each subcommand has its own default.
    pub seeds: Option<Vec<u64>>,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub methods: Vec<Method>,
    pub sweep_iota1: Vec<f64>,
    pub sweep_gamma: Vec<f64>,
    pub rollback_steps: usize,
    pub rollback_method: Method,
    pub defect: DefectGrids,
    pub grad_check: GradCheckSettings,
}

impl Resolved {
    pub fn seeds_or(&self, default: &[u64]) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| default.to_vec())
    }
}

pub const DEFAULT_HIDDEN: [usize; 3] = [32, 32, 32];

/// Reads, layers and validates a configuration. `path` may be absent, in
/// which case only defaults and flags apply.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Resolved> {
    let (src, file) = match path {
        Some(p) => {
            let src = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let file = parse_str(&src).map_err(|d| at_file(d, p, &src))?;
            (src, file)
        }
        None => (String::new(), ConfigFile::default()),
    };
    resolve(file, overrides).map_err(|d| match path {
        Some(p) => CliError::Config(at_file(d, p, &src)),
        None => CliError::Config(d),
    })
}

pub fn parse_str(src: &str) -> Result<ConfigFile, Diagnostic> {
    toml::from_str(src).map_err(|e| {
        let message = e.message().to_string();
        let kind = if message.starts_with("unknown field") {
            DiagnosticKind::UnknownKey
        } else if message.starts_with("missing field") {
            DiagnosticKind::MissingKey
        } else if message.starts_with("invalid type")
            || message.starts_with("invalid value")
            || message.starts_with("unknown variant")
            || message.starts_with("invalid length")
        {
            DiagnosticKind::Type
        } else {
            DiagnosticKind::Syntax
        };
        let key = match kind {
            DiagnosticKind::UnknownKey | DiagnosticKind::MissingKey => backticked(&message),
            _ => None,
        };
        let mut d = Diagnostic::new(kind, key.as_deref(), message.trim_end());
        d.line = e.span().map(|s| line_of_offset(src, s.start));
        d
    })
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn at_file(mut d: Diagnostic, path: &Path, src: &str) -> Diagnostic {
    d.file = Some(path.to_path_buf());
    if d.line.is_none() {
        if let Some(key) = &d.key {
            d.line = locate_key(src, key);
        }
    }
    d
}

/// 1-based line of `section.key` (or a top-level `key`) in a TOML source.
pub fn locate_key(src: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.rsplit_once('.') {
        Some((s, k)) => (s, k),
        None => ("", dotted),
    };
    let mut current = String::new();
    for (n, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = header.trim().to_string();
            if !section.is_empty() && current == section && key.is_empty() {
                return Some(n + 1);
            }
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else {
            continue;
        };
        let lhs = lhs.trim();
        if (current == section && lhs == key) || (current.is_empty() && !section.is_empty() && lhs == dotted) {
            return Some(n + 1);
        }
    }
    None
}

fn invalid(key: &str, message: impl Display) -> Diagnostic {
    Diagnostic::new(DiagnosticKind::Invariant, Some(key), message.to_string())
}

fn missing(key: &str, message: impl Display) -> Diagnostic {
    Diagnostic::new(DiagnosticKind::MissingKey, Some(key), message.to_string())
}

/// Attributes a core validation error to the first candidate key named in
/// its message, falling back to `fallback`.
fn attribute(section: &str, candidates: &[&str], fallback: &str, err: impl Display) -> Diagnostic {
    let message = err.to_string();
    let key = candidates
        .iter()
        .find(|k| message.contains(*k))
        .map(|k| format!("{section}.{k}"))
        .unwrap_or_else(|| fallback.to_string());
    invalid(&key, message)
}

fn apply_preset(run: &mut RunConfig, name: &str, key: &str) -> Result<(), Diagnostic> {
    let preset = presets::find(name).ok_or_else(|| {
        invalid(
            key,
            format!("unknown preset `{name}`; available: {}", presets::names().join(", ")),
        )
    })?;
    run.rollback = preset.rollback;
    run.method = preset.method();
    run.hyper.host = preset.host();
    run.hyper.base_lr = preset.base_lr();
    Ok(())
}

pub fn resolve(file: ConfigFile, flags: &Overrides) -> Result<Resolved, Diagnostic> {
    let mut run = RunConfig::default();
    if let Some(name) = &file.preset {
        apply_preset(&mut run, name, "preset")?;
    }
    if let Some(m) = file.method {
        run.method = m;
    }
    set(&mut run.epochs, file.epochs);
    set(&mut run.pretrain_epochs, file.pretrain_epochs);
    set(&mut run.pretrain_lr, file.pretrain_lr);
    set(&mut run.batch_size, file.batch_size);

    if let Some(r) = &file.rollback {
        set(&mut run.rollback.iota1, r.iota1);
        set(&mut run.rollback.iota2, r.iota2);
        set(&mut run.rollback.gamma, r.gamma);
    }
    if let Some(o) = &file.optimizer {
        let h = &mut run.hyper;
        set(&mut h.host, o.host);
        set(&mut h.base_lr, o.base_lr);
        set(&mut h.momentum, o.momentum);
        set(&mut h.beta1, o.beta1);
        set(&mut h.beta2, o.beta2);
        set(&mut h.epsilon, o.epsilon);
        set(&mut h.weight_decay, o.weight_decay);
        set(&mut h.l2sp_alpha, o.l2sp_alpha);
        set(&mut h.head_lr_scale, o.head_lr_scale);
        if o.max_grad_norm.is_some() {
            h.max_grad_norm = o.max_grad_norm;
        }
    }
    if let Some(s) = &file.schedule {
        run.schedule = match s.kind {
            ScheduleName::Constant => ScheduleKind::Constant,
            ScheduleName::Cosine => ScheduleKind::Cosine,
            ScheduleName::StepDecay => ScheduleKind::StepDecay {
                period: s
                    .period
                    .ok_or_else(|| missing("schedule.period", "step-decay needs `period`"))?,
                factor: s
                    .factor
                    .ok_or_else(|| missing("schedule.factor", "step-decay needs `factor`"))?,
            },
        };
        set(&mut run.floor_lr, s.floor_lr);
    }

    let mut upstream = TaskSpec::default();
    if let Some(t) = &file.task {
        set(&mut upstream.num_classes, t.num_classes);
        set(&mut upstream.dim, t.dim);
        set(&mut upstream.samples_per_class, t.samples_per_class);
        set(&mut upstream.radius, t.radius);
        set(&mut upstream.spread, t.spread);
        set(&mut upstream.seed, t.seed);
    }
    upstream
        .validate()
        .map_err(|e| attribute("task", &["num_classes", "dim", "samples_per_class", "radius", "spread"], "task", e))?;
    let mut shift = DomainShift::default();
    if let Some(s) = &file.shift {
        set(&mut shift.rotation, s.rotation);
        set(&mut shift.offset, s.offset);
        set(&mut shift.remap_labels, s.remap_labels);
    }
    run.downstream = derive_downstream(&upstream, shift)
        .map_err(|e| attribute("shift", &["rotation", "offset"], "shift", e))?;
    run.upstream = upstream;

    let model = file.model.unwrap_or_default();
    let hidden = model.hidden.unwrap_or_else(|| DEFAULT_HIDDEN.to_vec());
    if hidden.contains(&0) {
        return Err(invalid("model.hidden", "hidden layer sizes must be >= 1"));
    }
    run.model.layer_sizes = std::iter::once(run.upstream.dim)
        .chain(hidden)
        .chain(std::iter::once(run.upstream.num_classes))
        .collect();
    set(&mut run.model.activation, model.activation);

    // Flags.
    if let Some(name) = &flags.preset {
        apply_preset(&mut run, name, "--preset")?;
    }
    if let Some(m) = flags.method {
        run.method = m;
    }
    let seeds = if flags.seeds.is_empty() {
        file.seeds
    } else {
        Some(flags.seeds.clone())
    };
    if seeds.as_ref().is_some_and(Vec::is_empty) {
        return Err(invalid("seeds", "seed list must not be empty"));
    }
    if let Some(first) = seeds.as_ref().and_then(|s| s.first()) {
        run.seed = *first;
    }
    let out = flags
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| missing("out", "no output directory; set `out` in the config or pass --out"))?;
    let jobs = flags.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(invalid("jobs", "jobs must be >= 1"));
    }

    validate_run(&run)?;

    let methods = file.methods.unwrap_or_else(|| {
        if run.method == Method::Full {
            vec![Method::Full]
        } else {
            vec![Method::Full, run.method]
        }
    });
    if methods.is_empty() {
        return Err(invalid("methods", "method list must not be empty"));
    }

    let (sweep_iota1, sweep_gamma) = match file.sweep {
        Some(s) => (s.iota1, s.gamma),
        None => (DEFAULT_IOTA1_GRID.to_vec(), DEFAULT_GAMMA_GRID.to_vec()),
    };
    if sweep_iota1.is_empty() {
        return Err(invalid("sweep.iota1", "sweep grid must not be empty"));
    }
    if sweep_gamma.is_empty() {
        return Err(invalid("sweep.gamma", "sweep grid must not be empty"));
    }
    for &i in &sweep_iota1 {
        PenaltyConfig::new(i, 0.0, 1.0, 1, 1.0).map_err(|e| invalid("sweep.iota1", e))?;
    }
    for &g in &sweep_gamma {
        PenaltyConfig::new(0.0, 0.0, g, 1, 1.0).map_err(|e| invalid("sweep.gamma", e))?;
    }

    let rollback_eval = file.rollback_eval.unwrap_or_default();
    let rollback_steps = rollback_eval.steps.unwrap_or(50);
    if rollback_steps == 0 {
        return Err(invalid("rollback_eval.steps", "steps must be >= 1"));
    }
    let rollback_method = rollback_eval.method.unwrap_or(Method::Full);

    let defect = file.defect.unwrap_or_default();
    let defect = DefectGrids {
        eta_g: defect.eta_g.unwrap_or(Grid { min: -2.0, max: 2.0, count: 41 }),
        lambda: defect.lambda.unwrap_or(Grid { min: 0.0, max: 1.0, count: 41 }),
        theta_prev: defect.theta_prev.unwrap_or(Grid { min: -2.0, max: 2.0, count: 41 }),
    };
    for (key, g) in [
        ("defect.eta_g", defect.eta_g),
        ("defect.lambda", defect.lambda),
        ("defect.theta_prev", defect.theta_prev),
    ] {
        if g.count == 0 || !g.min.is_finite() || !g.max.is_finite() || g.min > g.max {
            return Err(invalid(key, "grid needs finite min <= max and count >= 1"));
        }
    }

    let gc = file.grad_check.unwrap_or_default();
    let grad_check = GradCheckSettings {
        epsilon: gc.epsilon.unwrap_or(1e-3),
        draws: gc.draws.unwrap_or(20),
        batch: gc.batch.unwrap_or(8),
        tolerance: gc.tolerance.unwrap_or(1e-4),
    };
    if !(1e-7..=1e-3).contains(&grad_check.epsilon) {
        return Err(invalid("grad_check.epsilon", "epsilon must lie in [1e-7, 1e-3]"));
    }
    if grad_check.draws == 0 || grad_check.batch == 0 {
        return Err(invalid("grad_check.draws", "draws and batch must be >= 1"));
    }
    if !(grad_check.tolerance > 0.0) {
        return Err(invalid("grad_check.tolerance", "tolerance must be > 0"));
    }

    Ok(Resolved {
        preset: flags.preset.clone().or(file.preset),
        run,
        seeds,
        out,
        jobs,
        methods,
        sweep_iota1,
        sweep_gamma,
        rollback_steps,
        rollback_method,
        defect,
        grad_check,
    })
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn validate_run(run: &RunConfig) -> Result<(), Diagnostic> {
    let RollbackLevels { iota1, iota2, gamma } = run.rollback;
    if !(0.0..=1.0).contains(&iota1) {
        return Err(invalid("rollback.iota1", format!("iota1 must lie in [0, 1], got {iota1}")));
    }
    if !(0.0..=1.0).contains(&iota2) {
        return Err(invalid("rollback.iota2", format!("iota2 must lie in [0, 1], got {iota2}")));
    }
    if iota1 < iota2 {
        return Err(invalid(
            "rollback.iota2",
            format!("constraint iota1 >= iota2 violated (iota1 = {iota1}, iota2 = {iota2})"),
        ));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid("rollback.gamma", format!("gamma must be > 0, got {gamma}")));
    }
    run.hyper.validate().map_err(|e| {
        attribute(
            "optimizer",
            &[
                "base_lr",
                "momentum",
                "beta1",
                "beta2",
                "epsilon",
                "weight_decay",
                "l2sp_alpha",
                "head_lr_scale",
                "max_grad_norm",
            ],
            "optimizer",
            e,
        )
    })?;
    run.finetune_schedule(1)
        .map_err(|e| attribute("schedule", &["period", "factor", "floor_lr"], "schedule", e))?;
    if run.batch_size == 0 {
        return Err(invalid("batch_size", "batch_size must be >= 1"));
    }
    if !(run.pretrain_lr > 0.0 && run.pretrain_lr.is_finite()) {
        return Err(invalid("pretrain_lr", format!("pretrain_lr must be > 0, got {}", run.pretrain_lr)));
    }
    run.validate().map_err(|e| invalid("model", e))
}
