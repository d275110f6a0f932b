//! Adam training of the victim captioner on teacher-forced LM loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::numeric::{adam_step, AdamState, LrSchedule, Tensor};
use crate::seeds::derive_seed;
use crate::synthdata::{render, Sample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Scheduler step size, in optimizer steps.
    pub lr_step: u64,
    pub lr_gamma: f64,
    /// Target mass spread uniformly over the trainable vocabulary.
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 45,
            batch_size: 16,
            lr: 1e-3,
            lr_step: 240,
            lr_gamma: 0.6,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_exact_match: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean loss of the first batch before any update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

/// Fraction of samples whose greedy caption equals the template caption.
pub fn exact_match_rate(model: &CaptionModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if model.caption(&s.image())? == s.caption() {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn augmentation_seed(sample: &Sample, epoch: usize) -> u64 {
    if epoch == 0 {
        sample.noise_seed
    } else {
        derive_seed(sample.noise_seed, &format!("augment/{epoch}"))
    }
}

struct BatchResult {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn batch_gradient(model: &CaptionModel, batch: &[(Tensor, Vec<usize>)], smoothing: f64) -> Result<BatchResult> {
    let excluded = model.vocab.lexicon();
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (image, caption) in batch {
        let mut s = model.session(true);
        let x = s.image(image, false)?;
        let (l, _) = s.lm_loss_excluding(x, caption, excluded, smoothing)?;
        loss += s.graph.value(l).item() * scale;
        let scaled = s.graph.scale(l, scale);
        s.graph.backward(scaled)?;
        for (acc, &v) in grads.iter_mut().zip(s.param_vars()) {
            if let Some(g) = s.graph.grad(v) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(BatchResult { loss, grads })
}

pub fn train(
    model: CaptionModel,
    train_set: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<(CaptionModel, TrainHistory)> {
    train_with_progress(model, train_set, validation, config, |_| {})
}

/// Trains in place of `model`, reporting each finished epoch. A
/// non-finite loss or gradient aborts with the last good parameters.
pub fn train_with_progress(
    mut model: CaptionModel,
    train_set: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(CaptionModel, TrainHistory)> {
    if train_set.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("training needs samples and a positive batch size"));
    }
    let schedule = LrSchedule::new(config.lr, config.lr_step, config.lr_gamma)?;
    let mut states: Vec<AdamState> = model.params().iter().map(|p| AdamState::new(p.numel())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/shuffle"));
    let mut history = TrainHistory::default();
    let mut step = 0u64;
    let vocab = model.vocab.clone();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    Ok((
                        render(&s.spec, augmentation_seed(s, epoch)),
                        vocab.caption_tokens(&s.caption())?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let result = batch_gradient(&model, &batch, config.label_smoothing)?;
            if step == 0 {
                history.initial_loss = result.loss;
            }
            let diverged = || Error::Diverged {
                epoch,
                step: step as usize,
                last_good: Box::new(model.clone()),
            };
            if !result.loss.is_finite() {
                return Err(diverged());
            }
            let lr = schedule.lr_at(step);
            let mut updated = Vec::with_capacity(states.len());
            for ((p, g), state) in model.params().iter().zip(&result.grads).zip(&mut states) {
                let mut data = p.to_vec();
                match adam_step(&mut data, g, state, lr) {
                    Ok(()) => {}
                    Err(Error::NonFiniteGradient { .. }) => return Err(diverged()),
                    Err(e) => return Err(e),
                }
                updated.push(Tensor::new(p.shape(), data)?);
            }
            model.set_params(updated);
            epoch_loss += result.loss;
            batches += 1;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            validation_exact_match: exact_match_rate(&model, validation)?,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}
