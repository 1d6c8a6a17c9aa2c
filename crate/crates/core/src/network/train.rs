//! Training and evaluation loops plus metrics emission.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::loss::{cross_entropy, topk_hits};
use super::model::Model;
use super::optim::{Sgd, TrainConfig};

/// Bumped whenever a metrics column is added, removed or reinterpreted.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Batch size used by [`evaluate`]; results do not depend on it beyond
/// summation order.
pub const EVAL_BATCH: usize = 32;

/// One row of the metrics CSV. Validation fields are empty when no
/// validation set was given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub epoch: usize,
    /// Optimizer steps taken so far, counted over the whole run.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub val_top1_err: Option<f64>,
    pub val_top5_err: Option<f64>,
    pub mean_grad_norm: f64,
    /// Wall time of the epoch; always 0 in deterministic mode.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

impl EvalMetrics {
    pub fn top1_err(&self) -> f64 {
        1.0 - self.top1
    }

    pub fn top5_err(&self) -> f64 {
        1.0 - self.top5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub grad_norm: f64,
}

/// Forward, backward and one SGD update on a single batch.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    x: &Tensor<T>,
    labels: &[usize],
    lr: f64,
    at: (usize, usize),
) -> Result<StepOutcome> {
    let logits = model.forward(x)?;
    let (loss, grad) = cross_entropy(&logits, labels)?;
    model.backward(&grad)?;
    let loss = loss.to_f64_lossy();
    if !loss.is_finite() || !logits.all_finite() {
        return Err(Error::NonFinite {
            epoch: at.0,
            step: at.1,
            grad_norms: model.grad_norm_report(),
        });
    }
    let grad_norm = model.grad_norm();
    sgd.step(model, lr);
    Ok(StepOutcome {
        loss,
        correct: topk_hits(&logits, labels).0,
        grad_norm,
    })
}

/// Shuffle and augmentation streams for `epoch`, derived from the run seed
/// alone so a resumed run sees the same data order as an uninterrupted one.
fn epoch_streams(seed: u64, epoch: usize) -> (u64, Rng) {
    let shuffle = Rng::with_stream(seed, 2 * epoch as u64 + 1).next_u64();
    (shuffle, Rng::with_stream(seed, 2 * epoch as u64 + 2))
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// One pass over `data` with the learning rate scheduled for `epoch`.
/// Validation fields of the returned record are left empty.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    sgd: &mut Sgd<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    deterministic: bool,
) -> Result<MetricsRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let lr = cfg.lr_at(epoch);
    let (shuffle, mut aug_rng) = epoch_streams(cfg.seed, epoch);
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let mut step = epoch * per_epoch;
    let (mut loss_sum, mut correct, mut grad_sum, mut steps) = (0.0, 0usize, 0.0, 0usize);
    for idx in batches(data.len(), cfg.batch_size, Some(shuffle)) {
        let aug = (!cfg.augmentation.is_identity()).then_some((&mut aug_rng, cfg.augmentation));
        let (x, labels) = data.batch::<T>(&idx, aug);
        let out = train_step(model, sgd, &x, &labels, lr, (epoch, step))?;
        loss_sum += out.loss * idx.len() as f64;
        correct += out.correct;
        grad_sum += out.grad_norm;
        steps += 1;
        step += 1;
    }
    let n = data.len().max(1) as f64;
    Ok(MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        epoch,
        step,
        lr,
        train_loss: loss_sum / n,
        train_acc: correct as f64 / n,
        val_loss: None,
        val_top1: None,
        val_top5: None,
        val_top1_err: None,
        val_top5_err: None,
        mean_grad_norm: grad_sum / steps.max(1) as f64,
        wall_ms: if deterministic { 0 } else { start.elapsed().as_millis() as u64 },
    })
}

/// Mean loss and top-1/top-5 accuracy over `data`, no augmentation.
pub fn evaluate<T: Scalar>(model: &mut Model<T>, data: &Dataset) -> Result<EvalMetrics> {
    let (mut loss_sum, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for idx in batches(data.len(), EVAL_BATCH, None) {
        let (x, labels) = data.batch::<T>(&idx, None);
        let logits = model.forward(&x)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        loss_sum += loss.to_f64_lossy() * idx.len() as f64;
        let (a, b) = topk_hits(&logits, &labels);
        top1 += a;
        top5 += b;
    }
    let n = data.len().max(1) as f64;
    Ok(EvalMetrics {
        samples: data.len(),
        loss: loss_sum / n,
        top1: top1 as f64 / n,
        top5: top5 as f64 / n,
    })
}

impl MetricsRecord {
    pub fn with_validation(mut self, m: &EvalMetrics) -> Self {
        self.val_loss = Some(m.loss);
        self.val_top1 = Some(m.top1);
        self.val_top5 = Some(m.top5);
        self.val_top1_err = Some(m.top1_err());
        self.val_top5_err = Some(m.top5_err());
        self
    }

    pub fn losses_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ok(self.train_loss) && self.val_loss.is_none_or(ok)
    }
}

/// Run epochs `start_epoch..cfg.epochs`, evaluating on `val` after each and
/// handing every record to `on_epoch` (for logging and checkpointing).
///
/// Momentum buffers are not part of a checkpoint, so resuming is exact only
/// with momentum 0.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    start_epoch: usize,
    deterministic: bool,
    on_epoch: &mut dyn FnMut(&MetricsRecord, &mut Model<T>) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    let mut sgd = Sgd::from_config(cfg);
    let mut out = vec![];
    for epoch in start_epoch..cfg.epochs {
        let mut rec = train_epoch(model, &mut sgd, train, cfg, epoch, deterministic)?;
        if let Some(v) = val {
            rec = rec.with_validation(&evaluate(model, v)?);
        }
        log::info!(
            "epoch {epoch}: train_loss {:.4} train_acc {:.4} val_loss {}",
            rec.train_loss,
            rec.train_acc,
            rec.val_loss.map_or("-".into(), |v| format!("{v:.4}"))
        );
        on_epoch(&rec, model)?;
        out.push(rec);
    }
    Ok(out)
}

/// Append records to a CSV, writing the header only when the file is new.
pub fn append_metrics_csv(path: impl AsRef<Path>, records: &[MetricsRecord]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(std::io::Error::from)?;
    let mut out = vec![];
    for rec in r.deserialize() {
        let rec: MetricsRecord = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if rec.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "metrics schema version {} (expected {METRICS_SCHEMA_VERSION})",
                    rec.schema_version
                ),
            });
        }
        out.push(rec);
    }
    Ok(out)
}
