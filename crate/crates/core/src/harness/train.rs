use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::optim::{LrSchedule, Method, Optimizer};
use crate::params::{LayerParams, ModelParams};
use crate::penalty::PenaltyConfig;
use crate::tasks::{generate, Split};

use super::metrics::{MetricsLog, MetricsRecord};
use super::{mix_seed, RunConfig};

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN_SHUFFLE: u64 = 2;
const STREAM_HEAD: u64 = 3;
const STREAM_FINETUNE_SHUFFLE: u64 = 4;

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Trained upstream model with every layer snapshotted as its anchor.
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    /// Final upstream valid accuracy.
    pub upstream_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Fine-tuned downstream model and optimizer state.
    pub checkpoint: Checkpoint,
    /// Network shape after the head swap.
    pub spec: MlpSpec,
    pub log: MetricsLog,
}

impl FinetuneOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.log.last().expect("finetune always records step 0")
    }
}

/// Trains `cfg.model` on the upstream task with the full method and snapshots
/// the result as the pre-trained reference.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let data = generate(&cfg.upstream)?;
    let spec = &cfg.model;
    let mut model = spec.init(mix_seed(cfg.seed, STREAM_INIT))?;

    let mut hyper = cfg.hyper;
    hyper.base_lr = cfg.pretrain_lr;
    let penalty = PenaltyConfig::disabled(model.n, cfg.pretrain_lr);
    let mut opt = Optimizer::new(Method::Full, hyper, penalty, &model)?;
    let schedule = LrSchedule::new(
        cfg.schedule,
        cfg.pretrain_lr,
        1,
        cfg.floor_lr.min(cfg.pretrain_lr),
    )?;

    let valid = data.valid.batch();
    let eval = |m: &ModelParams| {
        let acc = spec.accuracy(m, &valid, &data.valid.labels)?;
        Ok((acc, acc))
    };
    let mut log = new_log(&model);
    let steps = run_epochs(
        spec,
        &mut model,
        &mut opt,
        &data.train,
        schedule,
        cfg.pretrain_epochs,
        cfg.batch_size,
        mix_seed(cfg.seed, STREAM_PRETRAIN_SHUFFLE),
        eval,
        &mut log,
    )?;

    let upstream_acc = spec.accuracy(&model, &valid, &data.valid.labels)?;
    model.snapshot_as_pretrained();
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(model, cfg.seed, steps),
        log,
        upstream_acc,
    })
}

/// Swaps in a fresh downstream head and fine-tunes with `cfg.method`.
pub fn finetune(cfg: &RunConfig, pretrained: &Checkpoint) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let base = &pretrained.model_params;
    if let Some(layer) = base.layers.iter().find(|l| !l.has_pretrained()) {
        return Err(Error::MissingPretrained(layer.name.clone()));
    }
    let up = generate(&cfg.upstream)?;
    let down = generate(&cfg.downstream)?;
    let up_spec = &cfg.model;
    let (down_spec, mut model) = up_spec.reinit_head(
        base,
        cfg.downstream.num_classes,
        mix_seed(cfg.seed, STREAM_HEAD),
    )?;
    let upstream_head = head_layers(base).to_vec();

    let mut opt = Optimizer::new(cfg.method, cfg.hyper, cfg.penalty()?, &model)?;
    let schedule = cfg.finetune_schedule(1)?;

    let up_valid = up.valid.batch();
    let down_valid = down.valid.batch();
    let eval = |m: &ModelParams| {
        let down_acc = down_spec.accuracy(m, &down_valid, &down.valid.labels)?;
        let upstream = with_head(m, &upstream_head);
        let up_acc = up_spec.accuracy(&upstream, &up_valid, &up.valid.labels)?;
        Ok((down_acc, up_acc))
    };
    let mut log = new_log(&model);
    let steps = run_epochs(
        &down_spec,
        &mut model,
        &mut opt,
        &down.train,
        schedule,
        cfg.epochs,
        cfg.batch_size,
        mix_seed(cfg.seed, STREAM_FINETUNE_SHUFFLE),
        eval,
        &mut log,
    )?;

    let mut checkpoint = Checkpoint::new(model, cfg.seed, steps);
    checkpoint.optimizer_state = Some(opt.state);
    Ok(FinetuneOutcome {
        checkpoint,
        spec: down_spec,
        log,
    })
}

pub(crate) fn head_layers(model: &ModelParams) -> &[LayerParams] {
    &model.layers[model.layers.len() - 2..]
}

/// `model` with its head layers replaced by `head`.
pub(crate) fn with_head(model: &ModelParams, head: &[LayerParams]) -> ModelParams {
    let mut out = model.clone();
    let k = out.layers.len() - head.len();
    out.layers[k..].clone_from_slice(head);
    out
}

fn new_log(model: &ModelParams) -> MetricsLog {
    MetricsLog {
        layer_names: model.layers.iter().map(|l| l.name.clone()).collect(),
        anchored_layers: model
            .layers
            .iter()
            .filter(|l| l.has_pretrained())
            .map(|l| l.name.clone())
            .collect(),
        records: Vec::new(),
    }
}

fn record(
    model: &ModelParams,
    step: u64,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    accs: (f64, f64),
    rho: Vec<f64>,
) -> MetricsRecord {
    MetricsRecord {
        step,
        epoch,
        lr,
        train_loss,
        downstream_acc: accs.0,
        upstream_acc: accs.1,
        discrepancy: model.anchored_discrepancy_norm(),
        layer_discrepancy: model
            .layers
            .iter()
            .filter_map(|l| l.discrepancy().ok())
            .collect(),
        rho,
    }
}

/// Mini-batch training for `epochs` passes over `train`, recording metrics at
/// step 0 and after every epoch. Returns the number of steps taken.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    spec: &MlpSpec,
    model: &mut ModelParams,
    opt: &mut Optimizer,
    train: &Split,
    mut schedule: LrSchedule,
    epochs: usize,
    batch_size: usize,
    shuffle_seed: u64,
    eval: impl Fn(&ModelParams) -> Result<(f64, f64)>,
    log: &mut MetricsLog,
) -> Result<u64> {
    let steps_per_epoch = train.len().div_ceil(batch_size) as u64;
    let total = steps_per_epoch * epochs as u64;
    schedule.total_steps = total.max(1);

    let full_loss = spec.loss(model, &train.batch(), &train.targets())?;
    log.records.push(record(
        model,
        0,
        0,
        schedule.lr_at(1)?,
        full_loss,
        eval(model)?,
        vec![0.0; model.layers.len()],
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut rho = vec![0.0; model.layers.len()];
        let mut lr = 0.0;
        for chunk in order.chunks(batch_size) {
            step += 1;
            let (batch, targets) = train.gather(chunk);
            let (loss, mut grads) = match spec.loss_and_grads(model, &batch, &targets) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            lr = schedule.lr_at(step)?;
            let report = opt.step(model, &mut grads, lr)?;
            loss_sum += loss;
            rho = report.rho;
        }
        let train_loss = loss_sum / steps_per_epoch as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: train_loss,
            });
        }
        log.records
            .push(record(model, step, epoch, lr, train_loss, eval(model)?, rho));
    }
    Ok(step)
}
