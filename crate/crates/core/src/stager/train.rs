//! Two-stage stager training: the CRF transitions stay frozen while the
//! classification, change and duration losses train the rest; then the
//! CRF loss is switched on and everything is fine-tuned.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{stage_weights, total_loss, DurationConfig, LossComponents, LossWeights};
use super::model::{epoch_features, StagerModel};
use crate::autodiff::{Adam, AdamConfig, AdamState, CosineSchedule, ParamSet, StepOutcome, Tape, Tensor};
use crate::error::{Error, Result};
use crate::preproc::SpectrogramStack;
use crate::types::SleepStage;

/// One normalised night with its reference hypnogram.
#[derive(Debug, Clone, Copy)]
pub struct StagerSample<'a> {
    pub stack: &'a SpectrogramStack,
    pub hypnogram: &'a [SleepStage],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagerTrainConfig {
    pub adam: AdamConfig,
    pub lr_max: f64,
    pub lr_min: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Training sequences are random crops of this many epochs.
    pub crop_epochs: usize,
    /// `α, β, γ` apply in both stages; `η` is used in stage 2 only.
    pub weights: LossWeights,
    pub duration: DurationConfig,
    pub seed: u64,
}

impl Default for StagerTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            lr_max: 3e-3,
            lr_min: 3e-5,
            stage1_epochs: 100,
            stage2_epochs: 100,
            crop_epochs: 120,
            weights: LossWeights::default(),
            duration: DurationConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StagerTrainReport {
    pub stage1_loss: Vec<f64>,
    pub stage2_loss: Vec<f64>,
    pub last_components: LossComponents,
    /// Parameters at the end of stage 1.
    pub stage1_params: ParamSet,
    pub diverged: bool,
    pub skipped_steps: usize,
}

struct Prepared {
    features: Tensor,
    labels: Vec<usize>,
}

fn crop(p: &Prepared, start: usize, len: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = p.features.shape();
    let (c, r, e) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(c * r * len);
    for row in p.features.data().chunks(e) {
        out.extend_from_slice(&row[start..start + len]);
    }
    Ok((Tensor::new(vec![c, r, len], out)?, p.labels[start..start + len].to_vec()))
}

/// Runs both training stages on `model` in place.
pub fn two_stage_train(
    model: &mut StagerModel,
    train: &[StagerSample<'_>],
    config: &StagerTrainConfig,
) -> Result<StagerTrainReport> {
    if train.is_empty() {
        return Err(Error::invalid("stager training needs at least one subject"));
    }
    if config.stage1_epochs + config.stage2_epochs == 0 || config.crop_epochs == 0 {
        return Err(Error::invalid("stager training needs a positive epoch count and crop length"));
    }
    if !(config.lr_max > 0.0) || config.lr_min < 0.0 || config.lr_min > config.lr_max {
        return Err(Error::invalid("stager learning rates must satisfy 0 <= lr_min <= lr_max, lr_max > 0"));
    }
    let prepared = train
        .iter()
        .map(|s| {
            let features = epoch_features(s.stack, model.config.epoch_len)?;
            let n = features.shape()[2];
            if s.hypnogram.len() < n {
                return Err(Error::shape(
                    "two_stage_train",
                    format!("{} hypnogram epochs for {n} feature epochs", s.hypnogram.len()),
                ));
            }
            Ok(Prepared {
                features,
                labels: s.hypnogram[..n].iter().map(|s| s.index()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    model.class_weights = stage_weights(train.iter().map(|s| s.hypnogram));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = Adam::new(config.adam);
    let mut report = StagerTrainReport::default();
    let a_id = model.transitions_id();

    for stage in [1, 2] {
        let epochs = if stage == 1 { config.stage1_epochs } else { config.stage2_epochs };
        let weights = LossWeights {
            eta: if stage == 1 { 0.0 } else { config.weights.eta },
            ..config.weights
        };
        model.params.set_frozen(a_id, stage == 1);
        let mut state = AdamState::new(&model.params);
        let schedule = CosineSchedule {
            lr_max: config.lr_max,
            lr_min: config.lr_min,
            period: epochs,
        };
        let mut last_good = model.params.clone();
        for epoch in 0..epochs {
            let lr = schedule.lr(epoch);
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut diverged = false;
            for &i in &order {
                let p = &prepared[i];
                let n = p.labels.len();
                let len = config.crop_epochs.min(n);
                let start = rng.gen_range(0..=n - len);
                let (x, labels) = crop(p, start, len)?;
                let mut tape = Tape::new();
                let vars = model.params.bind(&mut tape);
                let y = model.logits_from_features(&mut tape, &vars, &x)?;
                let a = model.transitions_var(&vars);
                let (loss, parts) =
                    total_loss(&mut tape, y, a, &labels, &model.class_weights, &weights, &config.duration)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    diverged = true;
                    break;
                }
                tape.backward(loss)?;
                let grads = model.params.collect_grads(&tape, &vars);
                if adam.step(&mut model.params, &grads, &mut state, lr)? == StepOutcome::SkippedNonFinite {
                    report.skipped_steps += 1;
                }
                sum += value;
                report.last_components = parts;
            }
            if diverged || !model.params.all_finite() {
                log::warn!("stager training diverged in stage {stage}, epoch {epoch}");
                model.params = last_good;
                report.diverged = true;
                break;
            }
            last_good = model.params.clone();
            let mean = sum / order.len() as f64;
            if stage == 1 {
                report.stage1_loss.push(mean);
            } else {
                report.stage2_loss.push(mean);
            }
        }
        if stage == 1 {
            report.stage1_params = model.params.clone();
        }
        if report.diverged {
            break;
        }
    }
    model.params.set_frozen(a_id, false);
    model.trained = true;
    Ok(report)
}
