//! Dataset handling and the training / scoring loops.

mod data;

pub use data::*;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AugmentPolicy;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::metrics::{compute_eer, ScoreRecord};
use crate::model::{predict, save_checkpoint, Checkpoint, CheckpointMeta, Model, PsaConfig};
use crate::tensor::optim::{adam_step, lr_at, AdamState};
use crate::tensor::{Mode, BCE_CLAMP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub peak_lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: u64,
    pub seed: u64,
    pub unified_mode: bool,
    /// Spoof systems to train on when not unified (empty: all).
    pub attacks: Vec<String>,
    pub exec: ExecMode,
    /// Stop once an epoch's running train accuracy reaches this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            eval_batch_size: 32,
            peak_lr: 1e-4,
            weight_decay: 1e-3,
            warmup_steps: 1000,
            seed: 0,
            unified_mode: true,
            attacks: Vec::new(),
            exec: ExecMode::default(),
            target_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if let Some(a) = self.target_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("target_train_accuracy {a} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRun {
    pub model: PsaConfig,
    pub train: TrainConfig,
    pub augment: AugmentPolicy,
}

impl TrainRun {
    pub fn loader(&self, batch_size: usize) -> LoaderConfig {
        LoaderConfig {
            batch_size,
            input_len: self.model.input_len,
            seed: self.train.seed,
            augment: self.augment.clone(),
            unified: self.train.unified_mode,
            attacks: self.train.attacks.clone(),
            exec: self.train.exec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_loss: f64,
    /// NaN when the dev split lacks one of the classes.
    pub dev_eer: f64,
    pub lr: f32,
    pub steps: u64,
    pub seconds: f64,
}

pub const HISTORY_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tdev_loss\tdev_eer\tlr\tsteps\tseconds";

impl EpochRecord {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}\t{:.3e}\t{}\t{:.1}",
            self.epoch, self.train_loss, self.train_accuracy, self.dev_loss, self.dev_eer, self.lr, self.steps, self.seconds
        )
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let _ = writeln!(s, "{}", r.tsv_row());
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest dev loss seen, with optimizer state.
    pub best: Checkpoint,
    /// Model after the last epoch run.
    pub last: Model,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Mean BCE and scores of a whole split in eval mode.
pub fn split_loss(model: &Model, manifest: &DatasetManifest, split: Split, loader: &LoaderConfig) -> Result<(f64, Vec<ScoreRecord>)> {
    let records = evaluate(model, manifest, split, loader)?;
    let loss = records
        .iter()
        .map(|r| {
            let s = r.score.clamp(BCE_CLAMP as f64, 1.0 - BCE_CLAMP as f64);
            let y = r.key.label() as f64;
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / records.len() as f64;
    Ok((loss, records))
}

/// Trains from scratch. `observer` sees each epoch as it completes.
/// A non-finite loss aborts with [`Error::Divergence`].
pub fn train(run: &TrainRun, manifest: &DatasetManifest, observer: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    run.train.validate()?;
    run.augment.validate()?;
    let cfg = &run.train;
    for split in [Split::Train, Split::Dev] {
        if manifest.split(split).is_empty() {
            return Err(Error::Data(format!("split {split} is empty")));
        }
    }
    let mut model = Model::build(&run.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    model.set_exec(cfg.exec);
    let mut opt = AdamState::new(&model.store().sizes(), cfg.peak_lr, cfg.weight_decay);
    let train_loader = run.loader(cfg.batch_size);
    let dev_loader = LoaderConfig {
        augment: AugmentPolicy::disabled(),
        ..run.loader(cfg.eval_batch_size)
    };

    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, batch) in batch_iter(manifest, Split::Train, &train_loader, epoch as u64)?.enumerate() {
            let batch = batch?;
            step += 1;
            opt.lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps);
            model.store_mut().zero_grad();
            let (loss, scores) = model.train_step(&batch.inputs, &batch.labels, mix_seed(cfg.seed, step))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    lr: opt.lr,
                });
            }
            adam_step(&mut model.store_mut().tensors_mut(), &mut opt)?;
            loss_sum += loss as f64 * scores.len() as f64;
            correct += scores
                .iter()
                .zip(&batch.labels)
                .filter(|(s, y)| predict(**s) == (**y == 1.0))
                .count();
            seen += scores.len();
        }
        model.store_mut().zero_grad();

        let (dev_loss, dev_records) = split_loss(&model, manifest, Split::Dev, &dev_loader)?;
        let dev_eer = compute_eer(&dev_records).map_or(f64::NAN, |(e, _)| e);
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            dev_loss,
            dev_eer,
            lr: opt.lr,
            steps: step,
            seconds: start.elapsed().as_secs_f64(),
        };
        observer(&rec);
        let improved = best.as_ref().map_or(true, |c| dev_loss < c.meta.dev_loss as f64);
        if improved && dev_loss.is_finite() {
            best = Some(Checkpoint {
                model: model.clone(),
                meta: CheckpointMeta {
                    epoch: epoch as u64,
                    dev_loss: dev_loss as f32,
                },
                optimizer: Some(opt.clone()),
            });
        }
        let done = cfg.target_train_accuracy.is_some_and(|t| rec.train_accuracy >= t);
        history.push(rec);
        if done {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let best = best.ok_or_else(|| Error::NonFinite("dev loss never finite".into()))?;
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        stopped_early,
    })
}

/// Writes `best.ckpt` and `history.tsv` into `dir`.
pub fn save_outcome(outcome: &TrainOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &outcome.best;
    save_checkpoint(&b.model, &dir.join("best.ckpt"), b.meta, b.optimizer.as_ref())?;
    write_history(&dir.join("history.tsv"), &outcome.history)
}

/// Eval-mode scores for every entry of `split`, in protocol order.
/// Augmentation is never applied.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, split: Split, loader: &LoaderConfig) -> Result<Vec<ScoreRecord>> {
    let loader = LoaderConfig {
        augment: AugmentPolicy::disabled(),
        unified: true,
        ..loader.clone()
    };
    let mut out = Vec::with_capacity(manifest.split(split).len());
    for batch in batch_iter(manifest, split, &loader, 0)? {
        let batch = batch?;
        let scores = model.forward_scores(&batch.inputs, Mode::Eval, 0)?;
        for ((id, s), y) in batch.ids.into_iter().zip(scores).zip(&batch.labels) {
            let key = if *y == 1.0 { crate::metrics::Key::Bonafide } else { crate::metrics::Key::Spoof };
            out.push(ScoreRecord::new(id, s as f64, key));
        }
    }
    Ok(out)
}

/// Accuracy of eval-mode predictions on a split.
pub fn split_accuracy(model: &Model, manifest: &DatasetManifest, split: Split, loader: &LoaderConfig) -> Result<f64> {
    let records = evaluate(model, manifest, split, loader)?;
    let correct = records
        .iter()
        .filter(|r| predict(r.score as f32) == (r.key.label() == 1.0))
        .count();
    Ok(correct as f64 / records.len() as f64)
}
