//! Detector training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{events_in_chunk, DetectorModel, LossParts, NUM_CLASSES};
use crate::autodiff::{Adam, AdamState, StepOutcome, Tape, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, ApInput};
use crate::preproc::SpectrogramStack;
use crate::types::AnnotatedEvent;

/// One normalised night with its reference events.
#[derive(Debug, Clone, Copy)]
pub struct DetectorSample<'a> {
    pub stack: &'a SpectrogramStack,
    pub events: &'a [AnnotatedEvent],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub optim: TrainConfig,
    /// Optimiser steps per epoch; each step sees one training chunk.
    pub steps_per_epoch: usize,
    /// Probability that a training chunk is placed around a random event.
    pub event_centred: f64,
    /// Validation AP is computed every this many epochs (and after the last).
    pub eval_every: usize,
    pub val_iou: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            optim: TrainConfig::new(1e-3, 40, 0),
            steps_per_epoch: 16,
            event_centred: 0.5,
            eval_every: 5,
            val_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainReport {
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_parts: Vec<LossParts>,
    /// `(epoch, AP)` for each validation pass.
    pub val_ap: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub diverged: bool,
    pub skipped_steps: usize,
}

/// Inverse-frequency head weights: background keeps weight 1, each event
/// class gets `mean count / class count`. Absent classes get 1.
pub fn class_weights(samples: &[DetectorSample<'_>]) -> [f64; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for s in samples {
        for e in s.events {
            counts[e.kind.class_index()] += 1;
        }
    }
    let present: Vec<usize> = counts[1..].iter().copied().filter(|&c| c > 0).collect();
    let mut w = [1.0; NUM_CLASSES];
    if present.is_empty() {
        return w;
    }
    let mean = present.iter().sum::<usize>() as f64 / present.len() as f64;
    for k in 1..NUM_CLASSES {
        if counts[k] > 0 {
            w[k] = mean / counts[k] as f64;
        }
    }
    w
}

/// Draws a training chunk: frames `[start, start + len)` and its events in
/// chunk time.
pub fn sample_chunk<R: Rng + ?Sized>(
    model: &DetectorModel,
    sample: &DetectorSample<'_>,
    event_centred: f64,
    rng: &mut R,
) -> (SpectrogramStack, Vec<AnnotatedEvent>) {
    let stack = sample.stack;
    let hop = stack.frame_hop;
    let len = ((model.config.chunk_len / hop).round() as usize).min(stack.frames).max(1);
    let max_start = stack.frames - len;
    let start = if !sample.events.is_empty() && rng.gen::<f64>() < event_centred {
        let e = sample.events[rng.gen_range(0..sample.events.len())];
        let slack = (len as f64 * hop - e.duration()).max(0.0);
        let t0 = e.t_start - rng.gen::<f64>() * slack;
        ((t0 / hop).floor().max(0.0) as usize).min(max_start)
    } else {
        rng.gen_range(0..=max_start)
    };
    let t0 = start as f64 * hop;
    (
        stack.slice_frames(start, len),
        events_in_chunk(sample.events, t0, len as f64 * hop),
    )
}

/// Micro-averaged AP over all event classes on `samples`.
pub fn validation_ap(model: &DetectorModel, samples: &[DetectorSample<'_>], iou: f64) -> Result<f64> {
    let dets = samples
        .iter()
        .map(|s| model.detect_events(s.stack).map(|o| o.segments))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<ApInput<'_>> = dets
        .iter()
        .zip(samples)
        .map(|(d, s)| ApInput {
            detections: d,
            truths: s.events,
        })
        .collect();
    Ok(average_precision(&inputs, iou, None).unwrap_or(0.0))
}

/// Trains `model` in place. With validation data the parameters with the
/// best validation AP are kept; otherwise the final parameters are.
/// A non-finite loss stops training and keeps the best parameters so far.
pub fn train_detector(
    model: &mut DetectorModel,
    train: &[DetectorSample<'_>],
    val: &[DetectorSample<'_>],
    config: &DetectorTrainConfig,
) -> Result<DetectorTrainReport> {
    config.optim.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("detector training needs at least one subject"));
    }
    if config.steps_per_epoch == 0 || config.eval_every == 0 {
        return Err(Error::invalid("steps_per_epoch and eval_every must be positive"));
    }
    model.class_weights = class_weights(train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.optim.seed);
    let mut adam = Adam::new(config.optim.adam);
    adam.non_finite = config.optim.non_finite;
    let mut state = AdamState::new(&model.params);
    let mut report = DetectorTrainReport::default();
    let mut best: Option<(f64, crate::autodiff::ParamSet)> = None;
    let initial = model.params.clone();

    'epochs: for epoch in 0..config.optim.epochs {
        let lr = config.optim.schedule.lr(epoch);
        let mut sum = 0.0;
        let mut parts_sum = LossParts::default();
        for _ in 0..config.steps_per_epoch {
            let sample = &train[rng.gen_range(0..train.len())];
            let (chunk, events) = sample_chunk(model, sample, config.event_centred, &mut rng);
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let (loss, parts, _) = model.loss(&mut tape, &vars, &chunk, &events, None, &mut rng)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                log::warn!("detector loss became non-finite at epoch {epoch}");
                report.diverged = true;
                break 'epochs;
            }
            tape.backward(loss)?;
            let grads = model.params.collect_grads(&tape, &vars);
            if adam.step(&mut model.params, &grads, &mut state, lr)? == StepOutcome::SkippedNonFinite {
                report.skipped_steps += 1;
            }
            sum += value;
            parts_sum.spn_cls += parts.spn_cls;
            parts_sum.spn_reg += parts.spn_reg;
            parts_sum.head_cls += parts.head_cls;
            parts_sum.head_reg += parts.head_reg;
        }
        let n = config.steps_per_epoch as f64;
        report.epoch_loss.push(sum / n);
        report.epoch_parts.push(LossParts {
            spn_cls: parts_sum.spn_cls / n,
            spn_reg: parts_sum.spn_reg / n,
            head_cls: parts_sum.head_cls / n,
            head_reg: parts_sum.head_reg / n,
        });
        let last = epoch + 1 == config.optim.epochs;
        if !val.is_empty() && ((epoch + 1) % config.eval_every == 0 || last) {
            let ap = validation_ap(model, val, config.val_iou)?;
            log::info!("detector epoch {epoch}: loss {:.4}, val AP {ap:.3}", sum / n);
            report.val_ap.push((epoch, ap));
            if best.as_ref().is_none_or(|(b, _)| ap > *b) {
                best = Some((ap, model.params.clone()));
                report.best_epoch = Some(epoch);
            }
        }
    }
    match best {
        Some((_, params)) => model.params = params,
        None if report.diverged => {
            // Nothing validated before divergence; the last finite parameters
            // are unknown, so fall back to the initial ones.
            model.params = initial;
        }
        None => report.best_epoch = report.epoch_loss.len().checked_sub(1),
    }
    Ok(report)
}
