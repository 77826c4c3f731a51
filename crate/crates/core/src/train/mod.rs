//! Optimization loop, evaluation metrics and checkpoint persistence.

mod adam;
mod checkpoint;
mod metrics;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, normalize, Dataset, NormalizationStats};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::spectral::{dataset_spectrum, identify_main_periods, PeriodSet};

pub use adam::{adam_update, clip_global_norm, Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry, FORMAT_VERSION};
pub use metrics::{argmax, evaluate, metrics_from_logits, predict, Evaluation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            clip_norm: Some(5.0),
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Metrics after one epoch. Epoch 0 is the untrained model; its training
/// figures come from a plain evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Accuracy of the predictions made while training (before each update).
    pub train_accuracy: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Seconds since training started.
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub periods: PeriodSet,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_eval_accuracy: f64,
    pub best_eval_loss: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainReport {
    /// Copy with every wall time zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for e in &mut r.epochs {
            e.wall_time_secs = 0.0;
        }
        r
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("epoch 0 is always recorded")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Best model and the report that led to it.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub best: Checkpoint,
}

/// Training stopped early; `report` covers every epoch completed so far.
#[derive(Debug)]
pub struct TrainAbort {
    pub report: Option<Box<TrainReport>>,
    pub error: Error,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        Self {
            report: None,
            error,
        }
    }
}

/// Main periods of an already normalized training split, or the single
/// whole-series scale for the no-mp variant.
pub fn training_periods(cfg: &ModelConfig, train: &Dataset) -> Result<PeriodSet> {
    if cfg.variant == Variant::NoMp {
        return Ok(PeriodSet::whole_series(train.series_length()));
    }
    let spectrum = dataset_spectrum(train.values.view())?;
    identify_main_periods(&spectrum, cfg.k)
}

fn check_splits(cfg: &ModelConfig, train: &Dataset, eval: &Dataset) -> Result<()> {
    train.require_labels()?;
    eval.require_labels()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data(
            "training and evaluation splits must be non-empty".into(),
        ));
    }
    if train.label_names != eval.label_names {
        return Err(Error::Data(format!(
            "class lists differ between splits: {:?} vs {:?}",
            train.label_names, eval.label_names
        )));
    }
    if eval.dims() != train.dims() || eval.series_length() != train.series_length() {
        return Err(Error::Data(format!(
            "training split has {} variables of length {}, evaluation split {} of length {}",
            train.dims(),
            train.series_length(),
            eval.dims(),
            eval.series_length()
        )));
    }
    if cfg.input_dims != train.dims()
        || cfg.series_length != train.series_length()
        || cfg.num_classes != train.num_classes()
    {
        return Err(Error::config(format!(
            "model is configured for d={}, l={}, C={} but the data has d={}, l={}, C={}",
            cfg.input_dims,
            cfg.series_length,
            cfg.num_classes,
            train.dims(),
            train.series_length(),
            train.num_classes()
        )));
    }
    Ok(())
}

fn improves(e: &EpochRecord, best_acc: f64, best_loss: f64) -> bool {
    e.eval_accuracy > best_acc || (e.eval_accuracy == best_acc && e.eval_loss < best_loss)
}

/// Trains on raw (unnormalized) splits. Normalization statistics and main
/// periods come from `train` only; `eval` drives best-checkpoint selection
/// (accuracy first, lower loss on ties). When `checkpoint_path` is given the
/// best checkpoint is written there every time it changes, and a failed
/// write aborts with the report so far.
pub fn train(
    model_cfg: &ModelConfig,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome, TrainAbort> {
    model_cfg.validate()?;
    cfg.validate()?;
    check_splits(model_cfg, train, eval)?;
    let start = Instant::now();
    let (train_n, rest, stats) = normalize(train, &[eval])?;
    let eval_n = &rest[0];
    let periods = training_periods(model_cfg, &train_n)?;
    log::info!(
        "main periods: {:?}",
        periods.entries.iter().map(|e| e.period).collect::<Vec<_>>()
    );
    let mut model = Model::<f32>::init(model_cfg.clone(), periods.clone(), cfg.seed)?;
    let mut opt = Adam::new(&model.params, AdamConfig::with_lr(cfg.lr));

    let snapshot = |model: &Model<f32>, stats: &NormalizationStats| Checkpoint {
        model: model.clone(),
        normalization: Some(stats.clone()),
        label_names: train.label_names.clone(),
    };

    let mut report = TrainReport {
        model: model_cfg.clone(),
        train: cfg.clone(),
        periods,
        train_samples: train.len(),
        eval_samples: eval.len(),
        epochs: Vec::with_capacity(cfg.epochs + 1),
        best_epoch: 0,
        best_eval_accuracy: f64::NEG_INFINITY,
        best_eval_loss: f64::INFINITY,
        checkpoint_path: checkpoint_path.map(Path::to_path_buf),
    };
    let mut best = snapshot(&model, &stats);

    for epoch in 0..=cfg.epochs {
        let (train_loss, train_accuracy) = if epoch == 0 {
            let e = evaluate(&model, &train_n)?;
            (e.loss, e.accuracy)
        } else {
            run_epoch(&mut model, &mut opt, &train_n, cfg, epoch)?
        };
        let ev = evaluate(&model, eval_n)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4} acc {train_accuracy:.3}, eval loss {:.4} acc {:.3}",
            ev.loss,
            ev.accuracy
        );
        let better = improves(&record, report.best_eval_accuracy, report.best_eval_loss);
        report.epochs.push(record);
        if better {
            report.best_epoch = epoch;
            report.best_eval_accuracy = ev.accuracy;
            report.best_eval_loss = ev.loss;
            best = snapshot(&model, &stats);
            if let Some(path) = checkpoint_path {
                if let Err(error) = best.save(path) {
                    return Err(TrainAbort {
                        report: Some(Box::new(report)),
                        error,
                    });
                }
            }
        }
    }
    Ok(TrainOutcome { report, best })
}

/// One pass over the training data; returns mean loss and accuracy of the
/// pre-update predictions.
fn run_epoch(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64)> {
    let seed = cfg.seed.wrapping_add(epoch as u64);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for batch in batches(train, cfg.batch_size, seed, cfg.shuffle)? {
        let mut out = model.loss_and_grads(batch.values.view(), &batch.labels)?;
        let n = batch.labels.len();
        loss_sum += out.loss * n as f64;
        seen += n;
        for (row, &y) in out.logits.rows().into_iter().zip(&batch.labels) {
            if argmax(&row.to_vec()) == y {
                correct += 1;
            }
        }
        if let Some(max) = cfg.clip_norm {
            clip_global_norm(&mut out.grads, max);
        }
        opt.step(&mut model.params, &out.grads)?;
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}

/// Applies a checkpoint to a raw labeled dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, raw: &Dataset) -> Result<Evaluation> {
    raw.require_labels()?;
    if raw.label_names != ck.label_names {
        return Err(Error::config(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            ck.label_names, raw.label_names
        )));
    }
    let ds = ck.prepare(raw)?;
    evaluate(&ck.model, &ds)
}

impl Checkpoint {
    /// Normalizes raw data with the stored statistics after checking its
    /// shape against the model.
    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        let cfg = &self.model.config;
        if raw.dims() != cfg.input_dims || raw.series_length() != cfg.series_length {
            return Err(Error::config(format!(
                "checkpoint expects {} variables of length {}, dataset has {} of length {}",
                cfg.input_dims,
                cfg.series_length,
                raw.dims(),
                raw.series_length()
            )));
        }
        match &self.normalization {
            Some(stats) => stats.apply(raw),
            None => Ok(raw.clone()),
        }
    }
}
