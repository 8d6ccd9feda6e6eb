use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{augment, AugmentToggles, SegmentationSample};
use super::derive_seed;
use super::metrics::{MetricAccumulator, MetricsRecord};
use super::optim::{lr_schedule, Adam, AdamConfig, Schedule};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{channel_softmax, DType, Scalar, Tape, Tensor};

fn default_weight_decay() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentToggles,
    pub precision: DType,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<MetricsRecord>,
    pub steps: u64,
    /// Why training stopped early. The model then holds the parameters from
    /// the start of the last step whose loss and gradients were all finite.
    pub halted: Option<String>,
}

struct SampleOutcome<T> {
    metrics: MetricAccumulator,
    loss: f64,
    grads: Option<Vec<Tensor<T>>>,
}

/// Forward, loss and (when the loss is finite) backward for one sample.
fn sample_pass<T: Scalar>(
    model: &Model<T>,
    s: &SegmentationSample,
    backward: bool,
) -> Result<SampleOutcome<T>> {
    let classes = model.config.num_classes;
    let mut tape = Tape::<T>::new();
    tape.set_training(backward);
    let p = model.params.bind(&mut tape, backward);
    let x = tape.constant(s.image.cast());
    let y = model.forward(&mut tape, &p, x)?;
    let loss = tape.softmax_dice(y, &s.label)?;
    let lval = tape.value(loss).data()[0].as_f64();
    let probs: Vec<f64> = channel_softmax(tape.value(y).data(), classes)
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let metrics = MetricAccumulator::sample(classes, lval, &probs, &s.label, s.dims());
    let grads = if backward && lval.is_finite() {
        let mut g = tape.backward(loss)?;
        Some(
            p.vars()
                .iter()
                .zip(model.params.iter())
                .map(|(v, prm)| {
                    g.take(*v)
                        .unwrap_or_else(|| Tensor::zeros(prm.value.shape()))
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(SampleOutcome {
        metrics,
        loss: lval,
        grads,
    })
}

fn check_dataset<T: Scalar>(model: &Model<T>, data: &[SegmentationSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let cfg = &model.config;
    for (i, s) in data.iter().enumerate() {
        s.validate(cfg.num_classes).map_err(|e| match e {
            Error::NonFinite { index, .. } => Error::NonFinite {
                context: format!("image of sample {i}"),
                index,
            },
            Error::Data(m) => Error::Data(format!("sample {i}: {m}")),
            other => other,
        })?;
        if s.channels() != cfg.in_channels {
            return Err(Error::Data(format!(
                "sample {i} has {} channels, model expects {}",
                s.channels(),
                cfg.in_channels
            )));
        }
        if (0..3).any(|a| s.dims()[a] < cfg.input_size[a]) {
            return Err(Error::Data(format!(
                "sample {i} is {:?}, smaller than the model crop {:?}",
                s.dims(),
                cfg.input_size
            )));
        }
    }
    Ok(())
}

/// Seeded mini-batch training. Each epoch shuffles the dataset, then every
/// batch augments its samples, runs them in parallel on separate tapes,
/// sums their gradients in batch order, averages, and takes one Adam step.
/// Metrics are taken from the training forward passes; `on_epoch` sees
/// each record as it is produced.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(model, data)?;
    let classes = model.config.num_classes;
    let crop = model.config.input_size;
    let schedule = cfg.schedule();
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut records = Vec::with_capacity(cfg.total_epochs);
    let mut step = 0u64;
    // Parameters at the start of the last step that completed cleanly.
    let mut last_good: Option<Vec<Vec<T>>> = None;
    for epoch in 0..cfg.total_epochs {
        let lr = lr_schedule(epoch, &schedule);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[0, epoch as u64],
        )));
        let mut acc = MetricAccumulator::new(classes);
        for batch in order.chunks(cfg.batch_size) {
            let model_ref = &*model;
            let outcomes: Vec<Result<SampleOutcome<T>>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, step, i as u64]));
                    let s = augment(&data[i], cfg.augment, crop, &mut rng)?;
                    sample_pass(model_ref, &s, true)
                })
                .collect();
            let mut total: Option<Vec<Tensor<T>>> = None;
            for (slot, outcome) in outcomes.into_iter().enumerate() {
                let outcome = outcome?;
                acc.merge(&outcome.metrics);
                let Some(grads) = outcome.grads else {
                    let reason = format!(
                        "loss became {} at epoch {epoch}, step {step} (sample {})",
                        outcome.loss, batch[slot]
                    );
                    if let Some(good) = last_good.take() {
                        restore(model, good);
                    }
                    return Ok(TrainReport {
                        records,
                        steps: step,
                        halted: Some(reason),
                    });
                };
                match &mut total {
                    None => total = Some(grads),
                    Some(sum) => {
                        for (a, b) in sum.iter_mut().zip(&grads) {
                            a.data_mut()
                                .iter_mut()
                                .zip(b.data())
                                .for_each(|(x, y)| *x += *y);
                        }
                    }
                }
            }
            let mut grads = total.expect("batch is non-empty");
            let inv = T::c(1.0 / batch.len() as f64);
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            let start: Vec<Vec<T>> = model
                .params
                .iter()
                .map(|p| p.value.data().to_vec())
                .collect();
            if let Err(e) = adam.step(&mut model.params, &grads, lr) {
                if let Some(good) = last_good.take() {
                    restore(model, good);
                }
                return Ok(TrainReport {
                    records,
                    steps: step,
                    halted: Some(format!("epoch {epoch}, step {step}: {e}")),
                });
            }
            last_good = Some(start);
            step += 1;
        }
        let record = acc.finish(Some(epoch), Some(lr));
        on_epoch(&record)?;
        records.push(record);
    }
    Ok(TrainReport {
        records,
        steps: step,
        halted: None,
    })
}

fn restore<T: Scalar>(model: &mut Model<T>, values: Vec<Vec<T>>) {
    for (p, v) in model.params.iter_mut().zip(values) {
        p.value.data_mut().copy_from_slice(&v);
    }
}

/// Per-class Dice, HD95 and confidence histogram of the model's
/// predictions on centred crops of `data`.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[SegmentationSample]) -> Result<MetricsRecord> {
    check_dataset(model, data)?;
    let crop = model.config.input_size;
    let outcomes: Vec<Result<SampleOutcome<T>>> = data
        .par_iter()
        .map(|s| {
            let s = augment(
                s,
                AugmentToggles::NONE,
                crop,
                &mut ChaCha8Rng::seed_from_u64(0),
            )?;
            sample_pass(model, &s, false)
        })
        .collect();
    let mut acc = MetricAccumulator::new(model.config.num_classes);
    for o in outcomes {
        acc.merge(&o?.metrics);
    }
    Ok(acc.finish(None, None))
}
