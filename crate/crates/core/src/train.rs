//! AdamW, cosine schedule and the toy training loop.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::time::Duration;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::DualVit;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated `grad` (missing
    /// gradients count as zero).
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors but the store holds {}",
                self.first.len(),
                params.len()
            )));
        }
        for ((_, p), m) in params.iter().zip(&self.first) {
            if m.shape() != p.value.shape() {
                return Err(Error::shape("adamw", m.shape(), p.value.shape()));
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::shape("adamw", p.value.shape(), g.shape()));
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.as_ref().map(Tensor::data);
            let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let g = grad.map_or(0.0, |g| g[i].as_f64());
                let mi = self.beta1 * md[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * vd[i].as_f64() + (1.0 - self.beta2) * g * g;
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                pd[i] = T::lit(pd[i].as_f64() * decay - self.lr * update);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 500, batch_size: 16, lr: 1e-3, weight_decay: 0.05, seed: 0 }
    }
}

/// One row of the loss log (`step,loss,lr`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub final_accuracy: f64,
    /// Filled in by callers that have a clock.
    pub elapsed: Option<Duration>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] Error),
    /// The loss stopped being finite; `last_good` holds the parameters from
    /// before the failing step.
    #[error("loss became non-finite at step {step}")]
    NonFinite { step: usize, last_good: Box<ParamStore<f32>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy and mean cross-entropy of `model` over the whole dataset.
pub fn evaluate<T: Real>(model: &DualVit<T>, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = dataset.batch(chunk)?;
        let mut tape = Tape::with_params(&model.params);
        let x = tape.constant(images.cast());
        let logits = model.forward_tape(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss).item()?.as_f64() * chunk.len() as f64;
        let k = model.config.num_classes;
        for (row, &label) in tape.value(logits).data().chunks_exact(k).zip(&labels) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == label);
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation { accuracy: correct as f64 / n, mean_loss: loss_sum / n })
}

/// Supervised cross-entropy training with AdamW and cosine decay.
///
/// Batches are drawn from a per-epoch shuffle seeded by `config.seed`; an
/// epoch ends when fewer than `batch_size` unseen samples remain.
/// `on_step` sees every step's record as it is produced.
pub fn train_toy(
    model: &mut DualVit<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> core::result::Result<TrainReport, TrainError> {
    if dataset.num_classes > model.config.num_classes {
        return Err(Error::Input(format!(
            "dataset has {} classes but the model predicts {}",
            dataset.num_classes, model.config.num_classes
        ))
        .into());
    }
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()).into());
    }
    let batch = config.batch_size.clamp(1, dataset.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut records = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let (images, labels) = dataset.batch(&order[cursor..cursor + batch])?;
        cursor += batch;

        let lr = cosine_lr(config.lr, step, config.steps);
        let outcome = {
            let mut tape = Tape::with_params(&model.params);
            let x = tape.constant(images);
            model
                .forward_tape(&mut tape, x)
                .and_then(|logits| tape.cross_entropy(logits, &labels))
                .and_then(|loss| Ok((tape.value(loss).item()?, tape.backward(loss)?)))
        };
        let (loss, grads) = match outcome {
            Ok((loss, grads)) if loss.is_finite() => (loss, grads),
            Ok(_) | Err(Error::NonFinite { .. }) => {
                return Err(TrainError::NonFinite { step, last_good: Box::new(model.params.clone()) })
            }
            Err(e) => return Err(e.into()),
        };
        let record = StepRecord { step, loss: loss as f64, lr };
        on_step(&record);
        records.push(record);

        model.params.zero_grad();
        model.params.accumulate(&grads)?;
        opt.lr = lr;
        opt.step(&mut model.params)?;
    }
    model.params.zero_grad();
    let eval = evaluate(model, dataset, batch)?;
    Ok(TrainReport { steps: records, final_accuracy: eval.accuracy, elapsed: None })
}
