//! Mini-batch Adam training with early stopping on validation loss.

use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::network::{weighted_bce_with_logits, Gradients, Mlp};
use crate::seeding::{derive_seed, rng};

/// Features and 0/1 labels (1 = pathology).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub x: Array2<f64>,
    pub labels: Vec<f64>,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stacks row blocks.
    pub fn concat(parts: &[TrainingData]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.x.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch {
            expected: "equal feature counts".into(),
            got: e.to_string(),
        })?;
        Ok(Self {
            x,
            labels: parts.iter().flat_map(|p| p.labels.iter().copied()).collect(),
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(model: &mut Mlp) -> Self {
        let c = &model.config;
        let (lr, (beta1, beta2), eps) = (c.learning_rate, c.adam_betas, c.adam_epsilon);
        let shapes: Vec<Vec<usize>> = model.parameters_mut().iter().map(|p| p.shape().to_vec()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.as_slice())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((mut p, g), m), v) in model
            .parameters_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Class weights: `hc_weight` for label 0, 1 for label 1.
pub fn sample_weights(labels: &[f64], hc_weight: f64) -> Vec<f64> {
    labels.iter().map(|&y| if y < 0.5 { hc_weight } else { 1.0 }).collect()
}

/// Loss and accuracy (threshold 0.5) in evaluation mode.
pub fn evaluate(model: &Mlp, data: &TrainingData) -> Result<(f64, f64)> {
    let logits = model.logits(&data.x)?;
    let weights = sample_weights(&data.labels, model.config.hc_penalty_weight);
    let (loss, _) = weighted_bce_with_logits(&logits, &data.labels, &weights);
    let correct = logits
        .iter()
        .zip(&data.labels)
        .filter(|(&s, &y)| (s > 0.0) == (y > 0.5))
        .count();
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Trains a freshly initialized network. Samples are reshuffled every epoch;
/// a trailing batch with fewer than two rows is skipped. The parameters of
/// the epoch with the lowest validation loss are returned.
pub fn train(train: &TrainingData, val: &TrainingData, config: &crate::mlp::NetworkConfig) -> Result<(Mlp, TrainingLog)> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let mut model = Mlp::new(config.clone())?;
    let mut adam = Adam::new(&mut model);
    let mut shuffle_rng = rng(derive_seed(config.seed, &[1]));
    let mut dropout_rng = rng(derive_seed(config.seed, &[2]));
    let weights_all = sample_weights(&train.labels, config.hc_penalty_weight);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = train.x.select(Axis(0), chunk);
            let labels: Vec<f64> = chunk.iter().map(|&i| train.labels[i]).collect();
            let weights: Vec<f64> = chunk.iter().map(|&i| weights_all[i]).collect();
            let masks = model.sample_dropout(chunk.len(), &mut dropout_rng);
            let cache = model.forward_train(&x, &masks)?;
            let (loss, grads) = model.backward(&cache, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("training batch loss {loss} after {} optimizer steps", adam.step_count()),
                });
            }
            model.update_running_stats(&cache);
            adam.step(&mut model, &grads);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let (val_loss, val_accuracy) = evaluate(&model, val)?;
        if !val_loss.is_finite() || !model.all_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_accuracy:.3}", loss_sum / seen.max(1) as f64);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let (_, model) = best.expect("at least one epoch ran");
    Ok((model, log))
}
