//! Mini-batch training and evaluation loops.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use super::schedule::Schedule;
use crate::data::{Dataset, Sample};
use crate::error::{Result, SspError};
use crate::model::{save_checkpoint, FreezePolicy, VideoModel};
use crate::params::ParamId;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub adamw: AdamWConfig,
    pub policy: FreezePolicy,
    /// Shuffling seed.
    pub seed: u64,
    /// Worker threads for per-sample gradients; 0 picks the rayon default.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 5,
            peak_lr: 3e-3,
            min_lr: 1e-6,
            batch_size: 8,
            clip_norm: 1.0,
            adamw: AdamWConfig::default(),
            policy: FreezePolicy::SspPeft,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_epochs: self.warmup_epochs as f64,
            total_epochs: self.epochs as f64,
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
        }
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<MetricRow>,
    pub best_val_top1: f64,
    pub best_epoch: usize,
    pub final_val_top1: f64,
    /// `(name, sha256)` of every frozen tensor before and after training.
    pub frozen_before: Vec<(String, String)>,
    pub frozen_after: Vec<(String, String)>,
    pub trainable_tensors: usize,
    /// Tensors changed by each optimizer step.
    pub updated_per_step: usize,
    pub steps: u64,
}

impl TrainReport {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_before == self.frozen_after
    }

    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.loss)
            .collect()
    }
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Option<Tensor>>,
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn sample_gradients(model: &VideoModel, mask: &[bool], s: &Sample) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, mask);
    let out = model.forward(&mut tape, &bound, &s.video, false)?;
    let correct = argmax(tape.value(out.logits).data()) == s.label;
    let loss = tape.cross_entropy(out.logits, s.label)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(SampleResult {
            loss: value,
            correct,
            grads: Vec::new(),
        });
    }
    let mut g = tape.backward(loss)?;
    let grads = model
        .store
        .ids()
        .map(|id| {
            mask[id.0].then(|| {
                g.take(bound[id])
                    .unwrap_or_else(|| Tensor::zeros(model.store.get(id).shape()))
            })
        })
        .collect();
    Ok(SampleResult {
        loss: value,
        correct,
        grads,
    })
}

/// Mean cross-entropy and top-1 accuracy over `samples`.
pub fn evaluate(model: &VideoModel, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let logits = model.predict(&s.video)?;
            let loss = super::cross_entropy(&logits, s.label)?;
            Ok((loss, argmax(logits.data()) == s.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / n;
    let top1 = per.iter().filter(|p| p.1).count() as f64 / n;
    Ok((loss, top1))
}

fn frozen_hashes(model: &VideoModel, mask: &[bool]) -> Vec<(String, String)> {
    model
        .store
        .ids()
        .filter(|id| !mask[id.0])
        .map(|id| (model.store.entry(id).name.clone(), model.store.tensor_hash(id)))
        .collect()
}

fn dump_diagnostics(dir: Option<&Path>, model: &VideoModel, epoch: usize, step: u64, losses: &[f64]) {
    let Some(dir) = dir else { return };
    let bad: Vec<&str> = model
        .store
        .entries()
        .iter()
        .filter(|e| !e.tensor.is_finite())
        .map(|e| e.name.as_str())
        .collect();
    let report = serde_json::json!({
        "epoch": epoch,
        "step": step,
        "batch_losses": losses.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
        "non_finite_parameters": bad,
    });
    let _ = fs::write(dir.join("diagnostics.json"), report.to_string());
}

fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SspError::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Train `model` in place. With `run_dir`, writes `metrics.csv`,
/// `checkpoints/{init,best,final}` and `freeze_report.csv` there.
pub fn train(model: &mut VideoModel, data: &Dataset, cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<TrainReport> {
    run_in_pool(cfg.threads, || train_inner(model, data, cfg, run_dir))?
}

fn train_inner(
    model: &mut VideoModel,
    data: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || data.train.is_empty() {
        return Err(SspError::config(
            "training needs a positive batch size and training samples",
        ));
    }
    let mask = model.freeze_mask(cfg.policy);
    let trainable_tensors = mask.iter().filter(|&&m| m).count();
    let frozen_before = frozen_hashes(model, &mask);
    let mut opt = AdamW::new(cfg.adamw, &model.store, &mask);
    let schedule = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut metrics = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints")).map_err(|e| SspError::io(dir, e))?;
            save_checkpoint(model, &dir.join("checkpoints/init"))?;
            let path = dir.join("metrics.csv");
            Some(csv::Writer::from_path(&path).map_err(|e| SspError::format(&path, e.to_string()))?)
        }
        None => None,
    };

    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1) as f64;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::new();
    let (mut best_val, mut best_epoch, mut final_val) = (f64::NEG_INFINITY, 0, f64::NAN);
    let mut updated_per_step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + b;
            lr = schedule.lr_at(step as f64 / total_steps);
            let results: Vec<SampleResult> = chunk
                .par_iter()
                .map(|&i| sample_gradients(model, &mask, &data.train[i]))
                .collect::<Result<_>>()?;
            let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
            if losses.iter().any(|l| !l.is_finite()) {
                dump_diagnostics(run_dir, model, epoch, opt.step_count(), &losses);
                return Err(SspError::Numeric(format!(
                    "non-finite training loss at epoch {epoch}, step {}",
                    opt.step_count()
                )));
            }
            let mut grads: Vec<Option<Tensor>> = vec![None; mask.len()];
            for r in results {
                loss_sum += r.loss;
                correct += usize::from(r.correct);
                for (acc, g) in grads.iter_mut().zip(r.grads) {
                    let Some(g) = g else { continue };
                    match acc {
                        Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => *acc = Some(g),
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            updated_per_step = opt.step(&mut model.store, &grads, lr)?;
            if model.store.entries().iter().any(|e| !e.tensor.is_finite()) {
                dump_diagnostics(run_dir, model, epoch, opt.step_count(), &losses);
                return Err(SspError::Numeric(format!(
                    "non-finite parameters after step {}",
                    opt.step_count()
                )));
            }
        }
        let n = data.train.len() as f64;
        let train_row = MetricRow {
            epoch,
            split: "train".into(),
            loss: loss_sum / n,
            top1: correct as f64 / n,
            lr,
        };
        let (val_loss, val_top1) = evaluate(model, &data.val)?;
        let val_row = MetricRow {
            epoch,
            split: "val".into(),
            loss: val_loss,
            top1: val_top1,
            lr,
        };
        final_val = val_top1;
        if !data.val.is_empty() && val_top1 > best_val {
            best_val = val_top1;
            best_epoch = epoch;
            if let Some(dir) = run_dir {
                save_checkpoint(model, &dir.join("checkpoints/best"))?;
            }
        }
        if let Some(w) = metrics.as_mut() {
            for row in [&train_row, &val_row] {
                w.serialize(row).map_err(|e| SspError::Numeric(e.to_string()))?;
            }
            w.flush().map_err(|e| SspError::io("metrics.csv", e))?;
        }
        history.push(train_row);
        history.push(val_row);
    }

    let frozen_after = frozen_hashes(model, &mask);
    if let Some(dir) = run_dir {
        save_checkpoint(model, &dir.join("checkpoints/final"))?;
        write_freeze_report(dir, &frozen_before, &frozen_after)?;
    }
    Ok(TrainReport {
        history,
        best_val_top1: best_val,
        best_epoch,
        final_val_top1: final_val,
        frozen_before,
        frozen_after,
        trainable_tensors,
        updated_per_step,
        steps: opt.step_count(),
    })
}

fn write_freeze_report(dir: &Path, before: &[(String, String)], after: &[(String, String)]) -> Result<()> {
    let path = dir.join("freeze_report.csv");
    let mut out = String::from("tensor,sha256_before,sha256_after,status\n");
    for ((name, a), (_, b)) in before.iter().zip(after) {
        let status = if a == b { "unchanged" } else { "changed" };
        out.push_str(&format!("{name},{a},{b},{status}\n"));
    }
    fs::write(&path, out).map_err(|e| SspError::io(&path, e))
}

/// Ids of the tensors a policy trains, for reporting.
pub fn trainable_ids(model: &VideoModel, policy: FreezePolicy) -> Vec<ParamId> {
    let mask = model.freeze_mask(policy);
    model.store.ids().filter(|id| mask[id.0]).collect()
}
