use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use super::checkpoint::Checkpoint;
use super::config::{RunConfig, Strategy, Stream};
use super::data::load_split;
use super::eval::{fused_results, Weighter};
use crate::error::{Error, Result};
use crate::fusion::{candidate_features, UncertaintyHead};
use crate::gmw::{GmwModel, LossWeights, PreparedInstance, RunOptions};
use crate::nn::{AdamW, Mode};
use crate::synth::{rng_from, ObjectInstance};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based over both phases.
    pub epoch: usize,
    /// 1 = classification only, 2 = classification + beta * regression.
    pub phase: u8,
    pub loss_weights: LossWeights,
    pub train_loss: f64,
    pub train_cls: f64,
    pub train_reg: f64,
    /// Training objects whose Sinkhorn solve missed the tolerance.
    pub unconverged: usize,
    pub val_mae: Option<f64>,
    pub best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub best: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

fn mean_abs_error(errors: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = errors.fold((0.0, 0usize), |(s, n), e| (s + e, n + 1));
    sum / n as f64
}

pub fn prepare(instances: &[ObjectInstance], cfg: &RunConfig) -> Result<Vec<PreparedInstance>> {
    instances
        .iter()
        .map(|i| PreparedInstance::new(i, cfg.selection, cfg.model.inputs))
        .collect()
}

/// Eval-mode mean absolute fused-depth error of `model` on `data`.
pub fn gmw_val_mae(model: &GmwModel, data: &[PreparedInstance]) -> Result<f64> {
    let refs: Vec<&PreparedInstance> = data.iter().collect();
    let mut errors = Vec::with_capacity(data.len());
    for chunk in refs.chunks(64) {
        for (out, p) in model.infer(chunk)?.iter().zip(chunk) {
            errors.push((out.z_fused - p.z_star).abs());
        }
    }
    Ok(mean_abs_error(errors.into_iter()))
}

/// Two-phase training of the weighting network. `on_epoch` sees every
/// record, and the checkpoint whenever validation error improves.
pub fn train_gmw(
    cfg: &RunConfig,
    train: &[ObjectInstance],
    val: &[ObjectInstance],
    on_epoch: &mut dyn FnMut(&EpochRecord, Option<&Checkpoint>) -> Result<()>,
) -> Result<(Vec<EpochRecord>, Checkpoint)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t = &cfg.train;
    if t.cls_epochs + t.joint_epochs == 0 {
        return Err(Error::InvalidConfig("training needs at least one epoch".into()));
    }
    let train = prepare(train, cfg)?;
    let val = prepare(val, cfg)?;
    let mut model = GmwModel::new(cfg.model, cfg.stream_seed(Stream::ModelInit))?;
    let mut opt = AdamW::new(&model.store, t.optimizer);
    let mut rng = rng_from(cfg.stream_seed(Stream::Shuffle));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 0..t.cls_epochs + t.joint_epochs {
        let (phase, loss) = if epoch < t.cls_epochs {
            (1, LossWeights { cls: 1.0, reg: 0.0 })
        } else {
            (2, LossWeights { cls: 1.0, reg: t.beta })
        };
        order.shuffle(&mut rng);
        let (mut sums, mut batches, mut unconverged) = ([0.0; 3], 0usize, 0usize);
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch: Vec<&PreparedInstance> = chunk.iter().map(|&k| &train[k]).collect();
            let opts = RunOptions {
                mode: Mode::Train,
                loss,
                backward: true,
                kinks: false,
            };
            let step = model.run(&model.store, &batch, opts).and_then(|out| {
                let grads = out.grads.as_ref().expect("backward requested");
                opt.step(&mut model.store, grads)?;
                Ok(out)
            });
            let out = match step {
                Ok(out) => out,
                Err(e @ (Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_))) => {
                    write_dump(cfg, epoch, b, chunk, &e);
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            model.update_running_stats(&out);
            sums[0] += out.loss;
            sums[1] += out.cls;
            sums[2] += out.reg;
            batches += 1;
            unconverged += out.instances.iter().filter(|o| o.sinkhorn_iterations.is_some() && !o.converged).count();
        }
        let val_mae = gmw_val_mae(&model, &val)?;
        let improved = best.as_ref().is_none_or(|c| val_mae < c.val_mae);
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            phase,
            loss_weights: loss,
            train_loss: sums[0] / n,
            train_cls: sums[1] / n,
            train_reg: sums[2] / n,
            unconverged,
            val_mae: Some(val_mae),
            best: improved,
        };
        if improved {
            best = Some(Checkpoint::gmw(&model, cfg.selection, epoch, val_mae, Some(&opt)));
        }
        on_epoch(&record, if improved { best.as_ref() } else { None })?;
        records.push(record);
    }
    Ok((records, best.expect("at least one epoch ran")))
}

#[derive(Serialize)]
struct Dump<'a> {
    error: String,
    epoch: usize,
    batch: usize,
    objects: &'a [usize],
    config: &'a RunConfig,
}

fn write_dump(cfg: &RunConfig, epoch: usize, batch: usize, objects: &[usize], err: &Error) {
    let dump = Dump {
        error: err.to_string(),
        epoch,
        batch,
        objects,
        config: cfg,
    };
    // best effort: the original error is what gets reported
    if let Ok(text) = serde_json::to_string_pretty(&dump) {
        let _ = std::fs::write(cfg.output_dir.join("nonfinite_dump.json"), text);
    }
}

/// Fits the per-candidate uncertainty head on the training split.
pub fn train_uncertainty(
    cfg: &RunConfig,
    train: &[ObjectInstance],
    val: &[ObjectInstance],
) -> Result<(Vec<EpochRecord>, Checkpoint)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = train
        .iter()
        .map(|i| {
            let (x, c) = candidate_features(i, cfg.selection)?;
            Ok((x, c.iter().map(|c| c.z).collect(), i.z_star()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut head = UncertaintyHead::new(cfg.uncertainty, cfg.stream_seed(Stream::ModelInit))?;
    let history = head.fit(&data, cfg.stream_seed(Stream::Shuffle))?;
    let weighter = Weighter::Uncertainty(head);
    let val_mae = mean_abs_error(
        fused_results(&weighter, val, cfg.selection)?
            .iter()
            .map(|r| r.abs_error()),
    );
    let Weighter::Uncertainty(head) = weighter else { unreachable!() };
    let last = history.len().saturating_sub(1);
    let records = history
        .iter()
        .enumerate()
        .map(|(epoch, &nll)| EpochRecord {
            epoch,
            phase: 1,
            loss_weights: LossWeights { cls: 0.0, reg: 0.0 },
            train_loss: nll,
            train_cls: 0.0,
            train_reg: 0.0,
            unconverged: 0,
            val_mae: (epoch == last).then_some(val_mae),
            best: epoch == last,
        })
        .collect();
    Ok((records, Checkpoint::uncertainty(&head, cfg.selection, last, val_mae)))
}

/// Trains the model the configured strategy needs, writing the log to
/// `<output_dir>/train_log.jsonl` and the best checkpoint next to it.
pub fn cmd_train(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let strategy = cfg.eval.strategy;
    if !strategy.needs_checkpoint() {
        return Err(Error::InvalidConfig(format!("strategy `{strategy}` has nothing to train")));
    }
    let train = load_split(&cfg.data.train_path())?;
    let val = load_split(&cfg.data.val_path())?;
    let checkpoint_path = cfg.checkpoint_path(strategy);
    let log_path = cfg.output_dir.join(match strategy {
        Strategy::Uncertainty => "uncertainty_log.jsonl",
        _ => "train_log.jsonl",
    });
    let mut log = BufWriter::new(File::create(&log_path)?);
    let write_record = |r: &EpochRecord, log: &mut BufWriter<File>| -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        writeln!(log, "{line}")?;
        log.flush()?;
        Ok(())
    };
    let (records, best) = match strategy {
        Strategy::Uncertainty => {
            let (records, best) = train_uncertainty(cfg, &train, &val)?;
            for r in &records {
                write_record(r, &mut log)?;
                progress(r);
            }
            best.save(&checkpoint_path)?;
            (records, best)
        }
        _ => train_gmw(cfg, &train, &val, &mut |r, ckpt| {
            write_record(r, &mut log)?;
            if let Some(c) = ckpt {
                c.save(&checkpoint_path)?;
            }
            progress(r);
            Ok(())
        })?,
    };
    Ok(TrainSummary {
        records,
        best,
        checkpoint_path,
        log_path,
    })
}
