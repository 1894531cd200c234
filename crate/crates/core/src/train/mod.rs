//! Mini-batch training with AdamW and a warmup + cosine schedule.
//!
//! Per-sample gradients are computed in parallel and reduced in sample
//! order, so results do not depend on the number of worker threads.

pub mod data;
pub mod optim;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{argmax, save_checkpoint, Model};
use crate::tensor::Tensor;

pub use data::{load_idx, load_mnist, synthetic, LabeledImages};
pub use optim::{lr_at, AdamW, AdamWConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_acc";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATA_ENV: &str = "COUPLFORMER_DATA";

const SYNTHETIC_TRAIN_SEED: u64 = 0x5eed_0001;
const SYNTHETIC_VAL_SEED: u64 = 0x5eed_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` picks 10, or `max(1, epochs/5)` for runs shorter than 10 epochs.
    pub warmup_epochs: Option<usize>,
    pub seed: u64,
    pub dataset: DatasetKind,
    /// Training samples to use (the first N); `None` uses all.
    pub subset_size: Option<usize>,
    /// Validation samples to use (the first N); `None` uses all.
    pub val_size: Option<usize>,
    pub data_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 3e-2,
            batch_size: 128,
            epochs: 10,
            warmup_epochs: None,
            seed: 0,
            dataset: DatasetKind::Mnist,
            subset_size: None,
            val_size: None,
            data_dir: default_data_dir(),
        }
    }
}

/// `$COUPLFORMER_DATA`, else `data/mnist`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from)
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or(if self.epochs >= 10 { 10 } else { (self.epochs / 5).max(1) })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup() > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup(),
                self.epochs
            )));
        }
        Ok(())
    }
}

/// Train and validation splits for an experiment.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(LabeledImages, LabeledImages)> {
    let t = &cfg.train;
    match t.dataset {
        DatasetKind::Mnist => load_mnist(&t.data_dir, t.subset_size, t.val_size),
        DatasetKind::Synthetic => {
            let m = &cfg.model;
            let gen = |n, seed| synthetic(n, m.in_channels, m.img_h, m.img_w, m.num_classes, seed);
            Ok((
                gen(t.subset_size.unwrap_or(256), SYNTHETIC_TRAIN_SEED)?,
                gen(t.val_size.unwrap_or(128), SYNTHETIC_VAL_SEED)?,
            ))
        }
    }
}

/// Sample order for epoch `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
    /// Mean loss over the epoch's samples, measured as they were trained on.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?},{:?}",
            self.epoch, self.step, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy over a dataset.
pub fn evaluate(model: &Model, data: &LabeledImages) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let results: Vec<(f64, bool)> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(img, &label)| {
            let logits = model.predict(img)?;
            Ok((cross_entropy(&logits, label)?, argmax(logits.data()) == label))
        })
        .collect::<Result<_>>()?;
    let n = results.len();
    let loss = results.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let correct = results.iter().filter(|r| r.1).count();
    Ok(EvalReport {
        samples: n,
        accuracy: correct as f64 / n as f64,
        loss,
    })
}

fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Invalid(format!("label {label} out of range for {} classes", z.len())));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - z[label])
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean training-set loss before the first step.
    pub initial_loss: f64,
    pub history: Vec<EpochMetrics>,
    pub model: Model,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }
}

/// Trains the configured model, writing `config.txt`, `metrics.csv` and a
/// checkpoint under `out_dir`. `on_epoch` sees each row as it is produced.
pub fn train_loop(cfg: &ExperimentConfig, out_dir: &Path, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainReport> {
    cfg.validate()?;
    let (train, val) = load_datasets(cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_text())?;

    let t = &cfg.train;
    let mut model = Model::new(cfg.model.clone(), t.seed)?;
    let initial_loss = evaluate(&model, &train)?.loss;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: t.weight_decay,
        ..AdamWConfig::default()
    });

    let n = train.len();
    let steps_per_epoch = n.div_ceil(t.batch_size);
    let total_steps = steps_per_epoch * t.epochs;
    let warmup_steps = steps_per_epoch * t.warmup();
    let names = model.params().names().to_vec();
    let mut csv = format!("{METRICS_HEADER}\n");
    let mut history = Vec::with_capacity(t.epochs);
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 0..t.epochs {
        let order = epoch_permutation(t.seed, epoch, n);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(t.batch_size) {
            let samples: Vec<_> = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train.images[i], train.labels[i]))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for (s, &i) in samples.iter().zip(batch) {
                if !s.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {} at epoch {}, step {}, sample {i} (lr {lr:e})",
                        s.loss,
                        epoch + 1,
                        step + 1
                    )));
                }
                loss_sum += s.loss;
                correct += usize::from(s.correct);
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    acc.add_assign(g)?;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            lr = lr_at(step, total_steps, warmup_steps, t.lr);
            opt.step(model.params_mut().tensors_mut(), &grads, &names, lr)?;
            step += 1;
        }
        let val_acc = evaluate(&model, &val)?.accuracy;
        let row = EpochMetrics {
            epoch: epoch + 1,
            step,
            lr,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
        };
        csv.push_str(&row.csv_row());
        csv.push('\n');
        on_epoch(&row);
        history.push(row);
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    fs::write(&metrics_path, csv)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint_path, &model, cfg)?;
    Ok(TrainReport {
        initial_loss,
        history,
        model,
        metrics_path,
        checkpoint_path,
    })
}

/// Parses a metrics CSV written by [`train_loop`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: missing metrics header", path.display())));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad metrics row `{line}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                lr: num(f[2])?,
                train_loss: num(f[3])?,
                train_acc: num(f[4])?,
                val_acc: num(f[5])?,
            })
        })
        .collect()
}
