//! Sleep-stage network: convolutional encoder over epoch features, gated
//! skip fusion, LSTM over epochs and a CRF transition matrix.

use std::path::Path;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::crf::viterbi;
use super::loss::STAGES;
use crate::autodiff::checkpoint::restore_into;
use crate::autodiff::{load_checkpoint, save_checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::preproc::{SpectrogramStack, CHANNELS};
use crate::types::{Granularity, Hypnogram, SleepStage};

/// Channels of the per-epoch input: frame mean and frame max of each
/// spectrogram channel.
pub const EPOCH_FEATURES: usize = 2 * CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagerConfig {
    pub epoch_len: f64,
    pub conv_channels: usize,
    pub hidden: usize,
}

impl Default for StagerConfig {
    fn default() -> Self {
        Self {
            epoch_len: 30.0,
            conv_channels: 8,
            hidden: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    conv_a: (ParamId, ParamId),
    conv_b: (ParamId, ParamId),
    gate: (ParamId, ParamId),
    w_ih: ParamId,
    w_hh: ParamId,
    b_lstm: ParamId,
    out: (ParamId, ParamId),
    transitions: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagerModel {
    pub config: StagerConfig,
    pub params: ParamSet,
    /// Focal-loss stage weights fitted on the training fold.
    pub class_weights: [f64; STAGES],
    pub trained: bool,
    ids: Ids,
}

/// Viterbi hypnogram with its coarser labelling and total sleep time.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrediction {
    pub hypnogram: Hypnogram,
    pub granularity: Granularity,
    /// Per-epoch class index under `granularity`.
    pub labels: Vec<usize>,
    pub tst_hours: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: StagerConfig,
    class_weights: [f64; STAGES],
    trained: bool,
}

/// Per-epoch mean and max of every channel and range bin:
/// `[EPOCH_FEATURES, range, epochs]`.
pub fn epoch_features(stack: &SpectrogramStack, epoch_len: f64) -> Result<Tensor> {
    let per = (epoch_len / stack.frame_hop).round() as usize;
    if per == 0 || ((per as f64) * stack.frame_hop - epoch_len).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "epoch length {epoch_len} s is not a multiple of the frame hop {} s",
            stack.frame_hop
        )));
    }
    let epochs = stack.frames / per;
    if epochs == 0 {
        return Err(Error::invalid(format!(
            "recording of {} s is shorter than one {epoch_len} s epoch",
            stack.duration()
        )));
    }
    let r = stack.range_bins;
    let mut out = vec![0.0; EPOCH_FEATURES * r * epochs];
    for c in 0..CHANNELS {
        for b in 0..r {
            let row = stack.row(c, b);
            for e in 0..epochs {
                let w = &row[e * per..(e + 1) * per];
                let mean = w.iter().sum::<f64>() / per as f64;
                let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out[(c * r + b) * epochs + e] = mean;
                out[((CHANNELS + c) * r + b) * epochs + e] = max;
            }
        }
    }
    Tensor::new(vec![EPOCH_FEATURES, r, epochs], out)
}

impl StagerModel {
    pub fn new<R: Rng + ?Sized>(config: StagerConfig, rng: &mut R) -> Result<Self> {
        if config.conv_channels == 0 || config.hidden == 0 || !(config.epoch_len > 0.0) {
            return Err(Error::invalid("stager sizes must be positive"));
        }
        let mut p = ParamSet::new();
        let (c, h) = (config.conv_channels, config.hidden);
        let conv_a = (
            p.add_he("conv_a.w", &[c, EPOCH_FEATURES, 3, 3], EPOCH_FEATURES * 9, rng),
            p.add_zeros("conv_a.b", &[c]),
        );
        let conv_b = (p.add_he("conv_b.w", &[c, c, 3, 3], c * 9, rng), p.add_zeros("conv_b.b", &[c]));
        let gate = (p.add_he("gate.w", &[c, c, 1, 1], c, rng), p.add_zeros("gate.b", &[c]));
        let scale = 1.0 / (h as f64).sqrt();
        let w_ih = p.add("lstm.w_ih", Tensor::randn(&[4 * h, 2 * c], scale, rng));
        let w_hh = p.add("lstm.w_hh", Tensor::randn(&[4 * h, h], scale, rng));
        let mut bias = Tensor::zeros(&[4 * h]);
        // Forget-gate bias 1 keeps early gradients flowing through the cell.
        bias.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        let b_lstm = p.add("lstm.b", bias);
        let out = (p.add_he("out.w", &[STAGES, h], h, rng), p.add_zeros("out.b", &[STAGES]));
        let transitions = p.add_zeros("crf.transitions", &[STAGES, STAGES]);
        Ok(Self {
            config,
            params: p,
            class_weights: [1.0; STAGES],
            trained: false,
            ids: Ids {
                conv_a,
                conv_b,
                gate,
                w_ih,
                w_hh,
                b_lstm,
                out,
                transitions,
            },
        })
    }

    pub fn zeroed(config: StagerConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn transitions_id(&self) -> ParamId {
        self.ids.transitions
    }

    pub fn transitions(&self) -> &Tensor {
        self.params.get(self.ids.transitions)
    }

    /// Logits `[epochs, 5]` from epoch features `[EPOCH_FEATURES, range, epochs]`.
    pub fn logits_from_features(&self, tape: &mut Tape, vars: &[Var], x: &Tensor) -> Result<Var> {
        let v = |id: ParamId| vars[id.0];
        let ids = &self.ids;
        let x = tape.constant(x.clone());
        let a = tape.conv2d(x, v(ids.conv_a.0), Some(v(ids.conv_a.1)), (1, 1), (1, 1))?;
        let a = tape.relu(a);
        let b = tape.conv2d(a, v(ids.conv_b.0), Some(v(ids.conv_b.1)), (1, 1), (1, 1))?;
        let b = tape.relu(b);
        let s = tape.add(a, b)?;
        let g = tape.conv2d(s, v(ids.gate.0), Some(v(ids.gate.1)), (1, 1), (0, 0))?;
        let g = tape.sigmoid(g);
        let ga = tape.mul(g, a)?;
        let ng = tape.one_minus(g);
        let gb = tape.mul(ng, b)?;
        let fused = tape.add(ga, gb)?;
        let mean = tape.mean_axis(fused, 1)?;
        let max = tape.max_axis(fused, 1)?;
        let pooled = tape.concat(&[mean, max], 0)?;
        let e = tape.shape(pooled)[tape.shape(pooled).len() - 1];
        let pooled = tape.reshape(pooled, &[2 * self.config.conv_channels, e])?;
        let seq = tape.transpose(pooled)?;
        let hs = tape.lstm_sequence(seq, v(ids.w_ih), v(ids.w_hh), v(ids.b_lstm))?;
        tape.linear(hs, v(ids.out.0), Some(v(ids.out.1)))
    }

    pub fn logits(&self, tape: &mut Tape, vars: &[Var], stack: &SpectrogramStack) -> Result<Var> {
        let x = epoch_features(stack, self.config.epoch_len)?;
        self.logits_from_features(tape, vars, &x)
    }

    /// Transition matrix as a tape variable.
    pub fn transitions_var(&self, vars: &[Var]) -> Var {
        vars[self.ids.transitions.0]
    }

    /// Logits for a whole night, `[epochs × 5]` row-major.
    pub fn forward_logits(&self, stack: &SpectrogramStack) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let y = self.logits(&mut tape, &vars, stack)?;
        Ok(tape.value(y).clone())
    }

    pub fn decode(&self, logits: &Tensor) -> Vec<SleepStage> {
        viterbi(logits.data(), self.transitions().data(), STAGES)
            .into_iter()
            .map(|i| SleepStage::from_index(i).unwrap_or(SleepStage::W))
            .collect()
    }

    /// Viterbi hypnogram, its labels under `granularity`, and TST.
    pub fn predict(&self, stack: &SpectrogramStack, granularity: Granularity) -> Result<StagePrediction> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let y = self.forward_logits(stack)?;
        let stages = self.decode(&y);
        let hypnogram = Hypnogram::new(stages, self.config.epoch_len)?;
        Ok(StagePrediction {
            labels: hypnogram.epochs.iter().map(|&s| granularity.map(s)).collect(),
            tst_hours: hypnogram.tst_hours(),
            hypnogram,
            granularity,
        })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_checkpoint(&self.params, dir, stem)?;
        let meta = ModelMeta {
            config: self.config.clone(),
            class_weights: self.class_weights,
            trained: self.trained,
        };
        std::fs::write(
            dir.join(format!("{stem}.model.json")),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.model.json")))?)?;
        let mut model = Self::zeroed(meta.config)?;
        restore_into(&mut model.params, &load_checkpoint(dir, stem)?)?;
        model.class_weights = meta.class_weights;
        model.trained = meta.trained;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_features_average_and_max_frames() {
        let mut s = SpectrogramStack::zeros(1, 4);
        s.frame_hop = 15.0;
        for t in 0..4 {
            s.set(0, 0, t, t as f64);
        }
        let x = epoch_features(&s, 30.0).unwrap();
        assert_eq!(x.shape(), &[EPOCH_FEATURES, 1, 2]);
        assert_eq!(&x.data()[0..2], &[0.5, 2.5]);
        assert_eq!(&x.data()[6..8], &[1.0, 3.0]);
    }

    #[test]
    fn short_stack_is_rejected() {
        let mut s = SpectrogramStack::zeros(2, 10);
        s.frame_hop = 1.0;
        assert!(epoch_features(&s, 30.0).is_err());
    }
}
