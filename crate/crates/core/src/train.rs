//! Supervised training and evaluation of a classifier network.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::netspec::{backward, forward, forward_trace, Network};
use crate::scalar::Scalar;
use crate::tensor::ops::cross_entropy_with_grad;
use crate::tensor::{Adam, AdamConfig, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training-set accuracy measured after each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: u64,
}

/// Cross-entropy training of every trainable parameter with Adam.
/// `track_accuracy` re-evaluates on the training set after each epoch.
pub fn train_classifier<T: Scalar>(
    net: &Network,
    params: &mut Params<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    track_accuracy: bool,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = data.epoch_batches(cfg.batch_size, cfg.seed, epoch as u64);
        for idx in &batches {
            let (x, y) = data.batch(idx)?;
            params.zero_grad();
            let trace = forward_trace(net, params, &x, None)?;
            let (loss, g) = cross_entropy_with_grad(trace.logits(), &y)?;
            backward(net, params, &trace, vec![(net.output(), g)], None, false)?;
            opt.step(params)?;
            total += loss.as_f64();
        }
        report.epoch_loss.push(total / batches.len() as f64);
        if track_accuracy {
            report.epoch_accuracy.push(evaluate(net, params, data, 256)?);
        }
    }
    report.steps = opt.steps();
    Ok(report)
}

/// Top-1 accuracy as a fraction in [0, 1].
pub fn evaluate<T: Scalar>(
    net: &Network,
    params: &Params<T>,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for idx in data.sequential_batches(batch_size) {
        let (x, y) = data.batch(&idx)?;
        let logits = forward(net, params, &x)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
