//! Optimizer, learning-rate schedule and the training loop.

mod optim;
mod schedule;
mod trainer;

pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use schedule::Schedule;
pub use trainer::{evaluate, train, trainable_ids, MetricRow, TrainConfig, TrainReport};

use crate::error::{Result, SspError};
use crate::tensor::Tensor;

/// `−log softmax(logits)[label]` without a tape.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let x = logits.data();
    if label >= x.len() {
        return Err(SspError::contract(format!(
            "label {label} out of range for {} classes",
            x.len()
        )));
    }
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - x[label])
}

#[cfg(test)]
mod tests;
