//! Minibatch training loops for classifiers and autoencoders.
//!
//! Both loops share the same skeleton: seeded shuffle per epoch, cosine or
//! flat learning rate, cross-entropy or reconstruction loss, abort on any
//! non-finite loss. When a frozen layer prefix is set, its activations are
//! computed once and cached, and only the remaining layers run per batch.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::cluster::FeatureMatrix;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::exec::{Mode, ModelParams};
use crate::model::{Activation, LayerSpec};
use crate::optim::{cosine_lr, Optimizer, OptimizerConfig};
use crate::rng::{derive_seed, permutation, seed_rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Cosine-decay the learning rate over the epoch count.
    pub cosine_schedule: bool,
    pub seed: u64,
    /// Layers `0..frozen_prefix` stay constant and run in inference mode.
    pub frozen_prefix: usize,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer,
            cosine_schedule: true,
            seed,
            frozen_prefix: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub seed: u64,
    pub epochs: Vec<EpochStat>,
    pub final_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub holdout_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// Loss curve as csv, one row per epoch.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,holdout_loss\n");
        for stat in &self.epochs {
            let holdout = stat
                .holdout_loss
                .map(|v| v.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                stat.epoch, stat.lr, stat.train_loss, holdout
            ));
        }
        out
    }
}

fn epoch_chunks(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = seed_rng(derive_seed(seed, &format!("epoch{epoch}")));
    let order = permutation(&mut rng, n);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn gather_rows(t: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let stride: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * stride);
    for &i in indices {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = indices.len();
    Tensor::from_parts(shape, data)
}

fn trainable_range_has_batchnorm(params: &ModelParams<f32>, frozen: usize, end: usize) -> bool {
    params.spec.layers[frozen..end]
        .iter()
        .any(|l| matches!(l, LayerSpec::BatchNorm | LayerSpec::ResBlock { .. }))
}

fn check_finite(loss: f64, epoch: usize, what: &str) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "{what} loss became non-finite in epoch {epoch}; aborting"
        )));
    }
    Ok(loss)
}

/// Runs the frozen prefix once over the whole set, in order, in inference
/// mode. Returns the stacked activations.
fn cache_prefix_activations(
    params: &mut ModelParams<f32>,
    images: &Tensor<f32>,
    frozen: usize,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let mut pieces: Vec<f32> = Vec::new();
    let mut shape_tail: Vec<usize> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = gather_rows(images, &indices);
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let fwd = params.forward_range(&mut tape, x, Mode::Eval, 0..frozen, frozen)?;
        let out = tape.value(fwd.output);
        shape_tail = out.shape()[1..].to_vec();
        pieces.extend_from_slice(out.data());
        start = end;
    }
    let mut shape = vec![n];
    shape.extend(shape_tail);
    Ok(Tensor::from_parts(shape, pieces))
}

/// Cross-entropy training against integer labels. Returns the per-epoch
/// record; the model is updated in place.
pub fn train_classifier(
    params: &mut ModelParams<f32>,
    train: &LabeledImageSet,
    test: Option<&LabeledImageSet>,
    config: &TrainConfig,
) -> Result<RunRecord> {
    let started = Instant::now();
    let spec_len = params.spec.layers.len();
    let logits_end = if params.spec.has_trailing_softmax() {
        spec_len - 1
    } else {
        spec_len
    };
    let frozen = config.frozen_prefix;
    if frozen > logits_end {
        return Err(Error::Config(format!(
            "frozen prefix {frozen} swallows the whole trainable model"
        )));
    }
    match params.spec.output_shapes()?[logits_end - 1] {
        Activation::Flat { d } if d == train.num_classes() => {}
        other => {
            return Err(Error::SpecMismatch(format!(
                "model emits {other:?}, dataset has {} classes",
                train.num_classes()
            )))
        }
    }
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let skip_singletons = trainable_range_has_batchnorm(params, frozen, logits_end);
    if skip_singletons && config.batch_size < 2 {
        return Err(Error::Config(
            "batch size 1 cannot train batchnorm layers".into(),
        ));
    }

    // With a frozen prefix the features it produces never change, so run it
    // once up front and train the remainder on the cache.
    let cached = if frozen > 0 {
        Some(cache_prefix_activations(
            params,
            train.images(),
            frozen,
            config.batch_size.max(16),
        )?)
    } else {
        None
    };
    let labels = train.labels().to_vec();

    let trainable = params.params_in_layers(frozen..logits_end);
    let mut optimizer: Optimizer<f32> = Optimizer::new(config.optimizer.clone());
    let base_lr = config.optimizer.base_lr();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = if config.cosine_schedule {
            cosine_lr(base_lr, epoch, config.epochs)
        } else {
            base_lr
        };
        optimizer.set_lr(lr);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in epoch_chunks(train.len(), config.batch_size, config.seed, epoch) {
            if chunk.len() == 1 && skip_singletons {
                continue;
            }
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let fwd = match &cached {
                Some(feats) => {
                    let x = tape.constant(gather_rows(feats, &chunk));
                    params.forward_range(&mut tape, x, Mode::Train, frozen..logits_end, frozen)?
                }
                None => {
                    let x = tape.constant(train.gather_images(&chunk)?);
                    params.forward_range(&mut tape, x, Mode::Train, 0..logits_end, frozen)?
                }
            };
            let loss = tape.softmax_cross_entropy(fwd.output, &batch_labels)?;
            let loss_val = check_finite(tape.value(loss).data()[0] as f64, epoch, "training")?;
            tape.backward(loss)?;

            let mut grads = vec![Tensor::zeros(&[1]); trainable.len()];
            for (idx, id) in &fwd.param_ids {
                if trainable.contains(idx) {
                    grads[idx - trainable.start] = tape.grad_or_zeros(*id);
                }
            }
            optimizer.step(&mut params.tensors[trainable.clone()], &grads)?;

            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::Config("every batch was skipped; nothing trained".into()));
        }
        epochs.push(EpochStat {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            holdout_loss: None,
        });
    }

    let test_accuracy = match test {
        Some(set) => Some(evaluate_accuracy(params, set, config.batch_size)?),
        None => None,
    };
    Ok(RunRecord {
        kind: "classifier".into(),
        seed: config.seed,
        final_loss: epochs.last().expect("at least one epoch").train_loss,
        epochs,
        test_accuracy,
        holdout_loss: None,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Reconstruction training: example `i` is pulled towards image
/// `targets[i]` under mean squared error. A seeded 10% of the pairs are
/// held out and scored (but never trained on) every epoch.
pub fn train_autoencoder(
    params: &mut ModelParams<f32>,
    data: &LabeledImageSet,
    targets: &[usize],
    config: &TrainConfig,
) -> Result<RunRecord> {
    let started = Instant::now();
    if targets.len() != data.len() {
        return Err(Error::Dimension(format!(
            "{} targets for {} examples",
            targets.len(),
            data.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= data.len()) {
        return Err(Error::Dimension(format!("target index {bad} out of range")));
    }
    let (c, h, w) = data.image_dims();
    match params.spec.output_shape()? {
        Activation::Spatial { c: oc, h: oh, w: ow } if (oc, oh, ow) == (c, h, w) => {}
        other => {
            return Err(Error::SpecMismatch(format!(
                "model emits {other:?}, images are {c}x{h}x{w}"
            )))
        }
    }
    if config.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let spec_len = params.spec.layers.len();
    let frozen = config.frozen_prefix;
    let skip_singletons = trainable_range_has_batchnorm(params, frozen, spec_len);
    if skip_singletons && config.batch_size < 2 {
        return Err(Error::Config(
            "batch size 1 cannot train batchnorm layers".into(),
        ));
    }

    // seeded holdout split over pairs
    let mut rng = seed_rng(derive_seed(config.seed, "holdout"));
    let order = permutation(&mut rng, data.len());
    let n_holdout = (data.len() / 10).max(1);
    let mut holdout: Vec<usize> = order[..n_holdout].to_vec();
    let mut train_idx: Vec<usize> = order[n_holdout..].to_vec();
    holdout.sort_unstable();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        return Err(Error::Dataset("holdout split left no training pairs".into()));
    }

    let trainable = params.params_in_layers(frozen..spec_len);
    let mut optimizer: Optimizer<f32> = Optimizer::new(config.optimizer.clone());
    let base_lr = config.optimizer.base_lr();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = if config.cosine_schedule {
            cosine_lr(base_lr, epoch, config.epochs)
        } else {
            base_lr
        };
        optimizer.set_lr(lr);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in epoch_chunks(train_idx.len(), config.batch_size, config.seed, epoch) {
            if chunk.len() == 1 && skip_singletons {
                continue;
            }
            let examples: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let target_idx: Vec<usize> = examples.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(data.gather_images(&examples)?);
            let t = tape.constant(data.gather_images(&target_idx)?);
            let fwd = params.forward(&mut tape, x, Mode::Train, frozen)?;
            let loss = tape.mse(fwd.output, t)?;
            let loss_val =
                check_finite(tape.value(loss).data()[0] as f64, epoch, "reconstruction")?;
            tape.backward(loss)?;

            let mut grads = vec![Tensor::zeros(&[1]); trainable.len()];
            for (idx, id) in &fwd.param_ids {
                if trainable.contains(idx) {
                    grads[idx - trainable.start] = tape.grad_or_zeros(*id);
                }
            }
            optimizer.step(&mut params.tensors[trainable.clone()], &grads)?;

            loss_sum += loss_val * examples.len() as f64;
            seen += examples.len();
        }
        if seen == 0 {
            return Err(Error::Config("every batch was skipped; nothing trained".into()));
        }
        let holdout_loss = reconstruction_loss(params, data, targets, &holdout, config.batch_size)?;
        epochs.push(EpochStat {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            holdout_loss: Some(holdout_loss),
        });
    }

    let final_holdout = epochs.last().and_then(|e| e.holdout_loss);
    Ok(RunRecord {
        kind: "autoencoder".into(),
        seed: config.seed,
        final_loss: epochs.last().expect("at least one epoch").train_loss,
        epochs,
        test_accuracy: None,
        holdout_loss: final_holdout,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Mean squared reconstruction error of `examples` against their targets,
/// in inference mode.
pub fn reconstruction_loss(
    params: &mut ModelParams<f32>,
    data: &LabeledImageSet,
    targets: &[usize],
    examples: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Evaluation("no examples to score".into()));
    }
    let mut loss_sum = 0.0f64;
    for chunk in examples.chunks(batch_size.max(1)) {
        let target_idx: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        let mut tape = Tape::new();
        let x = tape.constant(data.gather_images(chunk)?);
        let t = tape.constant(data.gather_images(&target_idx)?);
        let fwd = params.forward(&mut tape, x, Mode::Eval, 0)?;
        let loss = tape.mse(fwd.output, t)?;
        loss_sum += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok(loss_sum / examples.len() as f64)
}

/// Index of the row maximum; equal values resolve to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit matches the label.
pub fn evaluate_accuracy(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Evaluation("empty evaluation set".into()));
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(set.gather_images(chunk)?);
        let fwd = params.forward_logits(&mut tape, x, Mode::Eval, 0)?;
        let logits = tape.value(fwd.output);
        let (rows, cols) = logits.dims2()?;
        for r in 0..rows {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            if argmax(row) == set.label(chunk[r]) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Softmax probabilities for every example, row per example.
pub fn predict_probabilities(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    batch_size: usize,
) -> Result<Tensor<f32>> {
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut rows: Vec<f32> = Vec::new();
    let mut cols = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = tape.constant(set.gather_images(chunk)?);
        let fwd = params.forward_logits(&mut tape, x, Mode::Eval, 0)?;
        let probs = tape.softmax(fwd.output)?;
        let out = tape.value(probs);
        cols = out.dims2()?.1;
        rows.extend_from_slice(out.data());
    }
    Ok(Tensor::from_parts(vec![set.len(), cols], rows))
}

/// Flattened feature vectors from the first `boundary` layers, inference
/// mode, one row per example.
pub fn extract_features(
    params: &mut ModelParams<f32>,
    set: &LabeledImageSet,
    boundary: usize,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let feats = cache_prefix_activations(params, set.images(), boundary, batch_size.max(1))?;
    let n = feats.shape()[0];
    let dim: usize = feats.shape()[1..].iter().product();
    let flat = feats.reshape(&[n, dim])?;
    FeatureMatrix::from_tensor(&flat)
}
