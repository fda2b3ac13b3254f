//! Minimal SGD trainer for producing baseline models.
//!
//! Plain SGD with momentum on softmax cross-entropy. Batch norm runs in
//! inference mode throughout; its running statistics chase each batch's
//! statistics with momentum 0.9. Deterministic per seed.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cost::CostCounters;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::graph::{LayerSpec, ModelGraph, ParamRole};
use crate::pruning::{stack_inputs, validate_accuracy};
use crate::tensor::{GradTape, Tensor};

const BN_STAT_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    /// Top-1 accuracy on the holdout split.
    pub baseline_accuracy: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn param_mut(layer: &mut LayerSpec, role: ParamRole) -> &mut Tensor {
    match (layer, role) {
        (LayerSpec::Conv { kernel, .. }, ParamRole::Kernel) => kernel,
        (LayerSpec::Conv { bias, .. }, ParamRole::Bias) => bias,
        (LayerSpec::Dense { weight, .. }, ParamRole::Weight)
        | (LayerSpec::Classifier { weight, .. }, ParamRole::Weight) => weight,
        (LayerSpec::Dense { bias, .. }, ParamRole::Bias)
        | (LayerSpec::Classifier { bias, .. }, ParamRole::Bias) => bias,
        (LayerSpec::BatchNorm { gamma, .. }, ParamRole::Gamma) => gamma,
        (LayerSpec::BatchNorm { beta, .. }, ParamRole::Beta) => beta,
        _ => unreachable!("binding role mismatches layer kind"),
    }
}

/// Per-channel mean and population variance over `[N, C, H, W]`.
fn batch_channel_stats(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut means = vec![0.0f32; c];
    let mut vars = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ch) * hw;
            for &v in &x.elems()[base..base + hw] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let mean = sum / count;
        means[ch] = mean as f32;
        vars[ch] = ((sq / count) - mean * mean).max(0.0) as f32;
    }
    (means, vars)
}

/// Trains a model and reports its holdout accuracy as the baseline.
pub fn train_baseline(
    model: &ModelGraph,
    train: &[Sample],
    holdout: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || holdout.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: HashMap<(usize, ParamRole), Tensor> = HashMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let samples: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let input = stack_inputs(&samples)?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

            let mut tape = GradTape::new();
            let fw = model.forward_taped(&mut tape, input)?;
            let loss = tape.softmax_cross_entropy(fw.logits, &labels)?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss_value;
            batches += 1;

            // running-stat update from this batch's batch norm inputs
            let mut stat_updates = Vec::new();
            for &(layer, vid) in &fw.bn_inputs {
                stat_updates.push((layer, batch_channel_stats(tape.value(vid))));
            }

            let grads = tape.backward(loss)?;
            for binding in &fw.params {
                let Some(grad) = grads.get(binding.value) else { continue };
                let vel = velocity
                    .entry((binding.layer, binding.role))
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                let param = param_mut(&mut model.layers[binding.layer], binding.role);
                for ((v, &g), p) in vel
                    .elems_mut()
                    .iter_mut()
                    .zip(grad.elems())
                    .zip(param.elems_mut())
                {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.lr * *v;
                }
            }
            for (layer, (batch_mean, batch_var)) in stat_updates {
                let LayerSpec::BatchNorm { mean, var, .. } = &mut model.layers[layer] else {
                    unreachable!("bn_inputs only lists batch norm layers")
                };
                for (m, b) in mean.elems_mut().iter_mut().zip(&batch_mean) {
                    *m = BN_STAT_MOMENTUM * *m + (1.0 - BN_STAT_MOMENTUM) * b;
                }
                for (v, b) in var.elems_mut().iter_mut().zip(&batch_var) {
                    *v = BN_STAT_MOMENTUM * *v + (1.0 - BN_STAT_MOMENTUM) * b;
                }
            }
        }
        epoch_losses.push(loss_sum / batches.max(1) as f64);
    }

    let scratch = CostCounters::new();
    let baseline_accuracy = validate_accuracy(&model, holdout, &scratch)?;
    model.baseline_accuracy = Some(baseline_accuracy as f32);
    Ok(TrainOutcome {
        model,
        baseline_accuracy,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::graph::build_mini_convnet;

    fn tiny_setup() -> (ModelGraph, Vec<Sample>, Vec<Sample>) {
        let spec = SyntheticSpec {
            classes: 4,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        };
        let model = build_mini_convnet(0.25, (1, 8, 8), 4, 1).unwrap();
        let data = generate_synthetic(&spec, 240, 2);
        let (train, holdout) = data.split_at(200);
        (model, train.to_vec(), holdout.to_vec())
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let (model, train, holdout) = tiny_setup();
        let cfg = TrainConfig { epochs: 1, lr: 0.0, ..TrainConfig::default() };
        let out = train_baseline(&model, &train, &holdout, &cfg).unwrap();
        for (a, b) in model.layers.iter().zip(&out.model.layers) {
            match (a, b) {
                (
                    LayerSpec::Conv { kernel: ka, bias: ba, .. },
                    LayerSpec::Conv { kernel: kb, bias: bb, .. },
                ) => {
                    assert_eq!(ka, kb);
                    assert_eq!(ba, bb);
                }
                (
                    LayerSpec::Classifier { weight: wa, bias: ba },
                    LayerSpec::Classifier { weight: wb, bias: bb },
                ) => {
                    assert_eq!(wa, wb);
                    assert_eq!(ba, bb);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_synthetic_blobs() {
        let (model, train, holdout) = tiny_setup();
        let cfg = TrainConfig { epochs: 3, lr: 0.01, ..TrainConfig::default() };
        let out = train_baseline(&model, &train, &holdout, &cfg).unwrap();
        assert!(
            out.epoch_losses.last().unwrap() < out.epoch_losses.first().unwrap(),
            "loss should fall: {:?}",
            out.epoch_losses
        );
    }

    #[test]
    fn same_seed_reproduces_identical_weights() {
        let (model, train, holdout) = tiny_setup();
        let cfg = TrainConfig { epochs: 2, lr: 0.02, seed: 5, ..TrainConfig::default() };
        let a = train_baseline(&model, &train, &holdout, &cfg).unwrap();
        let b = train_baseline(&model, &train, &holdout, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.baseline_accuracy, b.baseline_accuracy);
    }
}
