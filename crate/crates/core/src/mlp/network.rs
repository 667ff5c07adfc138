//! Fully connected network: `[affine → batch norm → ReLU → dropout]* →
//! affine → sigmoid`.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mlp::config::NetworkConfig;
use crate::seeding::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    /// in × out.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub config: NetworkConfig,
    pub hidden: Vec<HiddenLayer>,
    /// last hidden width × 1.
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

/// Gradients with the same layout as the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<HiddenGradients>,
    pub out_weight: Array2<f64>,
    pub out_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGradients {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
}

/// Per-layer inverted-dropout multipliers (0 or 1/(1 − p)).
pub type DropoutMasks = Vec<Array2<f64>>;

/// Intermediate values of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    layers: Vec<LayerCache>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    /// Batch-norm output before ReLU.
    normed: Array2<f64>,
    /// Layer output after ReLU and dropout.
    output: Array2<f64>,
    dropout: Array2<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on logits, averaged over samples, and its
/// derivative with respect to each logit.
pub fn weighted_bce_with_logits(logits: &Array1<f64>, labels: &[f64], weights: &[f64]) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, &s) in logits.iter().enumerate() {
        let (y, w) = (labels[i], weights[i]);
        loss += w * (s.max(0.0) - s * y + (-s.abs()).exp().ln_1p());
        grad[i] = w * (sigmoid(s) - y) / n;
    }
    (loss / n, grad)
}

fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((rows, cols), || u.sample(rng))
}

impl Mlp {
    /// Weights and biases uniform in `±1/√fan_in`; batch norm starts as the
    /// identity.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng(config.seed);
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim;
        for &width in &config.hidden {
            let weight = uniform_fan_in(fan_in, width, fan_in, &mut rng);
            let bias = uniform_fan_in(1, width, fan_in, &mut rng).row(0).to_owned();
            hidden.push(HiddenLayer {
                weight,
                bias,
                bn_scale: Array1::ones(width),
                bn_shift: Array1::zeros(width),
                running_mean: Array1::zeros(width),
                running_var: Array1::ones(width),
            });
            fan_in = width;
        }
        let out_weight = uniform_fan_in(fan_in, 1, fan_in, &mut rng);
        let out_bias = uniform_fan_in(1, 1, fan_in, &mut rng).row(0).to_owned();
        Ok(Self {
            config,
            hidden,
            out_weight,
            out_bias,
        })
    }

    /// Sets every trainable parameter to zero.
    pub fn zero_parameters(&mut self) {
        for l in &mut self.hidden {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
            l.bn_scale.fill(0.0);
            l.bn_shift.fill(0.0);
        }
        self.out_weight.fill(0.0);
        self.out_bias.fill(0.0);
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input features", self.config.input_dim),
                got: batch.ncols().to_string(),
            });
        }
        Ok(())
    }

    /// Fresh dropout masks for a batch of `n` rows.
    pub fn sample_dropout(&self, n: usize, rng: &mut impl Rng) -> DropoutMasks {
        let p = self.config.dropout;
        let keep = 1.0 / (1.0 - p);
        self.config
            .hidden
            .iter()
            .map(|&w| {
                if p == 0.0 {
                    Array2::ones((n, w))
                } else {
                    Array2::from_shape_simple_fn((n, w), || if rng.random::<f64>() < p { 0.0 } else { keep })
                }
            })
            .collect()
    }

    /// Masks that disable dropout.
    pub fn no_dropout(&self, n: usize) -> DropoutMasks {
        self.config.hidden.iter().map(|&w| Array2::ones((n, w))).collect()
    }

    /// Output logits in evaluation mode.
    pub fn logits(&self, batch: &Array2<f64>) -> Result<Array1<f64>> {
        self.check_input(batch)?;
        let eps = self.config.bn_eps;
        let mut x = batch.to_owned();
        for l in &self.hidden {
            let mut h = x.dot(&l.weight) + &l.bias;
            Zip::from(h.rows_mut()).for_each(|mut row| {
                Zip::from(&mut row)
                    .and(&l.running_mean)
                    .and(&l.running_var)
                    .and(&l.bn_scale)
                    .and(&l.bn_shift)
                    .for_each(|v, &m, &var, &g, &b| {
                        *v = (g * (*v - m) / (var + eps).sqrt() + b).max(0.0);
                    });
            });
            x = h;
        }
        Ok(x.dot(&self.out_weight).column(0).to_owned() + self.out_bias[0])
    }

    /// Probabilities. In `Train` mode this uses batch statistics and samples
    /// dropout from `rng`, without touching the running statistics.
    pub fn forward(&self, batch: &Array2<f64>, mode: Mode, rng: &mut impl Rng) -> Result<Array1<f64>> {
        let logits = match mode {
            Mode::Eval => self.logits(batch)?,
            Mode::Train => {
                let masks = self.sample_dropout(batch.nrows(), rng);
                self.forward_train(batch, &masks)?.logits
            }
        };
        Ok(logits.mapv(sigmoid))
    }

    /// Training-mode forward pass with the given dropout masks.
    pub fn forward_train(&self, batch: &Array2<f64>, dropout: &DropoutMasks) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let n = batch.nrows();
        if n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let eps = self.config.bn_eps;
        let mut layers = Vec::with_capacity(self.hidden.len());
        let mut x = batch.to_owned();
        for (l, mask) in self.hidden.iter().zip(dropout) {
            let h = x.dot(&l.weight) + &l.bias;
            let batch_mean = h.mean_axis(Axis(0)).expect("n >= 2");
            let centered = &h - &batch_mean;
            let batch_var = centered.mapv(|c| c * c).mean_axis(Axis(0)).expect("n >= 2");
            let inv_std = batch_var.mapv(|v| 1.0 / (v + eps).sqrt());
            let x_hat = &centered * &inv_std;
            let normed = &x_hat * &l.bn_scale + &l.bn_shift;
            let output = normed.mapv(|v| v.max(0.0)) * mask;
            x = output.clone();
            layers.push(LayerCache {
                batch_mean,
                batch_var,
                x_hat,
                inv_std,
                normed,
                output,
                dropout: mask.clone(),
            });
        }
        let logits = x.dot(&self.out_weight).column(0).to_owned() + self.out_bias[0];
        Ok(ForwardCache {
            input: batch.to_owned(),
            layers,
            logits,
        })
    }

    /// Loss and gradients of the weighted BCE for a cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, labels: &[f64], weights: &[f64]) -> Result<(f64, Gradients)> {
        let n = cache.logits.len();
        if labels.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} labels and weights"),
                got: format!("{} / {}", labels.len(), weights.len()),
            });
        }
        let (loss, dlogits) = weighted_bce_with_logits(&cache.logits, labels, weights);
        let last = cache.layers.last().map_or(&cache.input, |c| &c.output);
        let dlogits2 = dlogits.clone().insert_axis(Axis(1));
        let out_weight = last.t().dot(&dlogits2);
        let out_bias = Array1::from_elem(1, dlogits.sum());
        let mut dx = dlogits2.dot(&self.out_weight.t());

        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (k, (l, c)) in self.hidden.iter().zip(&cache.layers).enumerate().rev() {
            let mut dnormed = dx * &c.dropout;
            Zip::from(&mut dnormed).and(&c.normed).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            let bn_scale = (&dnormed * &c.x_hat).sum_axis(Axis(0));
            let bn_shift = dnormed.sum_axis(Axis(0));
            let dxhat = &dnormed * &l.bn_scale;
            let nf = n as f64;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.x_hat).sum_axis(Axis(0));
            let dh = (&dxhat * nf - &sum_dxhat - &c.x_hat * &sum_dxhat_xhat) * &(&c.inv_std / nf);
            let input = if k == 0 { &cache.input } else { &cache.layers[k - 1].output };
            let weight = input.t().dot(&dh);
            let bias = dh.sum_axis(Axis(0));
            dx = dh.dot(&l.weight.t());
            hidden.push(HiddenGradients {
                weight,
                bias,
                bn_scale,
                bn_shift,
            });
        }
        hidden.reverse();
        Ok((
            loss,
            Gradients {
                hidden,
                out_weight,
                out_bias,
            },
        ))
    }

    /// Exponential moving average of the batch statistics of a forward pass
    /// (unbiased variance).
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.config.bn_momentum;
        let n = cache.logits.len() as f64;
        for (l, c) in self.hidden.iter_mut().zip(&cache.layers) {
            l.running_mean = &l.running_mean * (1.0 - m) + &c.batch_mean * m;
            l.running_var = &l.running_var * (1.0 - m) + &c.batch_var * (m * n / (n - 1.0));
        }
    }

    /// Mutable views of all trainable parameters, in a fixed order.
    pub fn parameters_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(l.weight.view_mut().into_dyn());
            out.push(l.bias.view_mut().into_dyn());
            out.push(l.bn_scale.view_mut().into_dyn());
            out.push(l.bn_shift.view_mut().into_dyn());
        }
        out.push(self.out_weight.view_mut().into_dyn());
        out.push(self.out_bias.view_mut().into_dyn());
        out
    }

    /// SHA-256 over every parameter and running statistic.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |a: &[f64]| {
            for x in a {
                hasher.update(x.to_le_bytes());
            }
        };
        for l in &self.hidden {
            for a in [
                l.weight.as_slice(),
                l.bias.as_slice(),
                l.bn_scale.as_slice(),
                l.bn_shift.as_slice(),
                l.running_mean.as_slice(),
                l.running_var.as_slice(),
            ] {
                feed(a.expect("standard layout"));
            }
        }
        feed(self.out_weight.as_slice().expect("standard layout"));
        feed(self.out_bias.as_slice().expect("standard layout"));
        crate::hex_digest(hasher)
    }

    pub fn all_finite(&self) -> bool {
        let finite = |a: &[f64]| a.iter().all(|x| x.is_finite());
        self.hidden.iter().all(|l| {
            finite(l.weight.as_slice().unwrap_or(&[]))
                && finite(l.bias.as_slice().unwrap_or(&[]))
                && finite(l.bn_scale.as_slice().unwrap_or(&[]))
                && finite(l.bn_shift.as_slice().unwrap_or(&[]))
        }) && finite(self.out_weight.as_slice().unwrap_or(&[]))
    }
}

impl Gradients {
    /// Gradient tensors in the order of [`Mlp::parameters_mut`].
    pub fn tensors(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for g in &self.hidden {
            out.push(g.weight.view().into_dyn());
            out.push(g.bias.view().into_dyn());
            out.push(g.bn_scale.view().into_dyn());
            out.push(g.bn_shift.view().into_dyn());
        }
        out.push(self.out_weight.view().into_dyn());
        out.push(self.out_bias.view().into_dyn());
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}
