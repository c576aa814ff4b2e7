use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, conv, ToyCnn};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with class labels and binary sensitive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `[b, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub sensitive: Vec<u8>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Parameter gradients in [`ToyCnn::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    fn zeros_like(model: &ToyCnn) -> Self {
        Gradients(model.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.0.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.05, batch_size: 32, seed: 0 }
    }
}

fn param_name(model: &ToyCnn, slot: usize) -> String {
    let n = model.conv_layers.len();
    let part = if slot.is_multiple_of(2) { "weights" } else { "bias" };
    if slot / 2 < n {
        format!("conv layer {} {part}", slot / 2 + 1)
    } else {
        format!("head {part}")
    }
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_gradients(model: &ToyCnn, batch: &SampleBatch) -> Result<(f64, Gradients)> {
    model.validate()?;
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if batch.images.shape().first() != Some(&b) {
        return Err(Error::shape("batch", "image count differs from label count"));
    }
    let classes = model.num_classes();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
    }
    let s = batch.images.shape();
    if s.len() != 4 || s[1..] != model.input {
        return Err(Error::shape("input", format!("expected [b, {:?}], got {s:?}", model.input)));
    }
    let scale = 1.0 / b as f64;
    let per_sample: Vec<Result<(f64, Gradients)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let trace = conv::forward_sample(model, batch.images.row(i))?;
            let logits = &trace.logits;
            let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            let y = batch.labels[i];
            let loss = lse - logits[y] as f64;
            let dlogits: Vec<f32> = logits
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let p = (v as f64 - lse).exp();
                    let t = if k == y { 1.0 } else { 0.0 };
                    ((p - t) * scale) as f32
                })
                .collect();
            let mut g = Gradients::zeros_like(model);
            conv::backward_sample(model, &trace, &dlogits, &mut g.0);
            Ok((loss, g))
        })
        .collect();
    let mut total = 0.0f64;
    let mut grads = Gradients::zeros_like(model);
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        grads.add(&g);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    for (slot, g) in grads.0.iter().enumerate() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", param_name(model, slot))));
        }
    }
    Ok((loss, grads))
}

pub fn sgd_step(model: &mut ToyCnn, grads: &Gradients, lr: f32) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let names: Vec<String> = (0..grads.0.len()).map(|s| param_name(model, s)).collect();
    for ((p, g), name) in model.params_mut().into_iter().zip(&grads.0).zip(names) {
        for (x, d) in p.iter_mut().zip(g) {
            *x -= lr * d;
        }
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(())
}

/// One SGD step on `batch`; returns the pre-step loss.
pub fn backward_and_step(model: &mut ToyCnn, batch: &SampleBatch, lr: f32) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    let (loss, grads) = loss_and_gradients(model, batch)?;
    sgd_step(model, &grads, lr)?;
    Ok(loss)
}

/// Minibatch SGD with a seeded per-epoch shuffle. Returns mean loss per epoch.
pub fn train(model: &mut ToyCnn, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk);
            total += backward_and_step(model, &batch, cfg.lr as f32)? * chunk.len() as f64;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

/// Argmax prediction per sample; ties resolve to the lowest class index.
pub fn evaluate(model: &ToyCnn, data: &Dataset) -> Result<Vec<usize>> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let logits = model.logits(&data.images)?;
    Ok((0..data.len()).map(|i| argmax(logits.row(i))).collect())
}
