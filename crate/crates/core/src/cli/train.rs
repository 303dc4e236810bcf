use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{load_dataset, Dataset};
use super::eval::{evaluate, ClassDice, EvalOptions};
use crate::engine::{backward, Scalar, Var};
use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::loss::{argmax_labels, deep_supervision_loss, LabelPyramid, SupervisionWeights};
use crate::model::{build_model, save_checkpoint, Precision, SfbNet};
use crate::optim::AdamW;
use crate::pipeline::{augment, derive_seed, make_batch, Sample};

pub const CHECKPOINT_FILE: &str = "model.sfbn";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Dice of the training batches seen during the epoch, pooled over
    /// pixels.
    pub train_dice: ClassDice,
    pub mean_dice: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_run: usize,
    pub final_loss: f64,
    /// Evaluation-mode Dice on the training images after the last epoch.
    pub final_train_dice: ClassDice,
    pub final_train_mean_dice: f64,
    pub step_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seconds: f64,
}

#[derive(Default)]
struct DiceCounts {
    inter: [usize; 3],
    pred: [usize; 3],
    truth: [usize; 3],
}

impl DiceCounts {
    fn add(&mut self, pred: &[i32], truth: &[i32]) {
        for (&p, &t) in pred.iter().zip(truth) {
            for c in 0..3 {
                let k = c as i32 + 1;
                self.inter[c] += (p == k && t == k) as usize;
                self.pred[c] += (p == k) as usize;
                self.truth[c] += (t == k) as usize;
            }
        }
    }

    fn dice(&self) -> ClassDice {
        let d = |c: usize| {
            let den = self.pred[c] + self.truth[c];
            if den == 0 {
                1.0
            } else {
                2.0 * self.inter[c] as f64 / den as f64
            }
        };
        ClassDice {
            rv: d(0),
            myo: d(1),
            lv: d(2),
        }
    }
}

/// Trains on the configured dataset and writes the checkpoint, the
/// per-epoch JSON-lines log and the resolved configuration into
/// `output_dir`.
///
/// `stop_at_dice` ends training after the first epoch whose evaluation-mode
/// training Dice reaches the threshold.
pub fn run_train(cfg: &RunConfig, stop_at_dice: Option<f64>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, stop_at_dice),
        Precision::F64 => train_typed::<f64>(cfg, &data, stop_at_dice),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, data: &Dataset, stop_at_dice: Option<f64>) -> Result<TrainSummary> {
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&config_path, e))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut model = build_model::<T>(&cfg.model)?;
    let mut opt = AdamW::<T>::new(cfg.optimizer.clone(), cfg.total_steps());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3));
    let start = Instant::now();
    let mut step_losses = Vec::with_capacity(cfg.total_steps());
    let mut epochs_run = 0;
    let mut final_eval = None;
    for epoch in 0..cfg.epochs {
        let mut counts = DiceCounts::default();
        let mut epoch_loss = 0.0;
        let lr = opt.current_lr();
        for _ in 0..cfg.iterations_per_epoch {
            let picks: Vec<usize> = (0..cfg.batch_size)
                .map(|_| rng.random_range(0..data.train.len()))
                .collect();
            let step = opt.steps_taken();
            let batch: Vec<Sample> = picks
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    if cfg.augmentation {
                        let seed = derive_seed(cfg.seed ^ 0xA46, (step * cfg.batch_size + k) as u64);
                        augment(&data.train[i], &cfg.augment, seed)
                    } else {
                        data.train[i].clone()
                    }
                })
                .collect();
            let loss = train_step(&mut model, &mut opt, &batch, &mut counts)?;
            step_losses.push(loss);
            epoch_loss += loss;
        }
        epochs_run = epoch + 1;
        let train_dice = counts.dice();
        let entry = EpochLog {
            epoch: epochs_run,
            step: opt.steps_taken(),
            lr,
            loss: epoch_loss / cfg.iterations_per_epoch as f64,
            mean_dice: train_dice.mean(),
            train_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "epoch {} step {} loss {:.4} dice {:.4}",
            entry.epoch,
            entry.step,
            entry.loss,
            entry.mean_dice
        );
        if let Some(target) = stop_at_dice {
            let report = evaluate(&mut model, &data.train, EvalOptions::default())?;
            let reached = report.mean_dice >= target;
            final_eval = Some(report);
            if reached {
                break;
            }
        }
    }
    let report = match final_eval {
        Some(r) => r,
        None => evaluate(&mut model, &data.train, EvalOptions::default())?,
    };
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model, &checkpoint)?;
    Ok(TrainSummary {
        steps: step_losses.len(),
        epochs_run,
        final_loss: step_losses.last().copied().unwrap_or(f64::NAN),
        final_train_dice: report.per_class_dice,
        final_train_mean_dice: report.mean_dice,
        step_losses,
        checkpoint,
        metrics: metrics_path,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn train_step<T: Scalar>(
    model: &mut SfbNet<T>,
    opt: &mut AdamW<T>,
    batch: &[Sample],
    counts: &mut DiceCounts,
) -> Result<f64> {
    let refs: Vec<&Sample> = batch.iter().collect();
    let (images, labels) = make_batch::<T>(&refs)?;
    let outputs = model.forward(&Var::constant(images), Ctx::TRAIN)?;
    let pyramid = LabelPyramid::from_full(&labels)?;
    let loss = deep_supervision_loss(outputs.as_array(), &pyramid, SupervisionWeights::default())?;
    let value = loss.total.value().data()[0].to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "loss became {value} at step {}",
            opt.steps_taken() + 1
        )));
    }
    let pred = argmax_labels(outputs.full.value())?;
    counts.add(&pred.data, &labels.data);
    let grads = backward(&loss.total)?;
    opt.step(model, &grads);
    Ok(value)
}
