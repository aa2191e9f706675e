//! Per-channel normalisation with statistics frozen from training data.

use serde::{Deserialize, Serialize};

use super::{SpectrogramStack, CHANNELS, CH_DOPPLER};
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = 1e-10;

/// `v ↦ (f(v)·scale − mean) / std` with `f = ln(· + 1e-10)` when `log` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub log: bool,
    pub scale: f64,
    pub mean: f64,
    pub std: f64,
}

impl ChannelNorm {
    pub const IDENTITY: Self = Self {
        log: false,
        scale: 1.0,
        mean: 0.0,
        std: 1.0,
    };

    fn pre(&self, v: f64) -> f64 {
        let x = if self.log { (v + LOG_FLOOR).ln() } else { v };
        x * self.scale
    }

    pub fn apply(&self, v: f64) -> f64 {
        (self.pre(v) - self.mean) / self.std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub channels: [ChannelNorm; CHANNELS],
    /// Channels whose training variance was zero and fell back to `std = 1`.
    pub zero_variance: [bool; CHANNELS],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            channels: [ChannelNorm::IDENTITY; CHANNELS],
            zero_variance: [false; CHANNELS],
        }
    }

    /// Log-compresses and standardises the power channels using every value
    /// of `train`; scales Doppler by the slow-time Nyquist frequency.
    pub fn fit(train: &[&SpectrogramStack]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::invalid("normalisation needs at least one training stack"))?;
        if train.iter().any(|s| s.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("spectrogram stack".into()));
        }
        let nyquist = first.slow_rate / 2.0;
        let mut stats = Self::identity();
        for c in 0..CHANNELS {
            if c == CH_DOPPLER {
                stats.channels[c].scale = 1.0 / nyquist;
                continue;
            }
            let base = ChannelNorm {
                log: true,
                ..ChannelNorm::IDENTITY
            };
            let (mut n, mut sum) = (0usize, 0.0);
            for s in train {
                for &v in s.channel(c) {
                    sum += base.pre(v);
                    n += 1;
                }
            }
            let mean = if n == 0 { 0.0 } else { sum / n as f64 };
            let var = if n == 0 {
                0.0
            } else {
                train
                    .iter()
                    .flat_map(|s| s.channel(c))
                    .map(|&v| (base.pre(v) - mean).powi(2))
                    .sum::<f64>()
                    / n as f64
            };
            let std = var.sqrt();
            let zero = !(std > 1e-12 * mean.abs().max(1.0));
            stats.zero_variance[c] = zero;
            stats.channels[c] = ChannelNorm {
                mean,
                std: if zero { 1.0 } else { std },
                ..base
            };
        }
        Ok(stats)
    }

    pub fn apply(&self, stack: &SpectrogramStack) -> SpectrogramStack {
        let mut out = stack.clone();
        for (c, norm) in self.channels.iter().enumerate() {
            for v in out.channel_mut(c) {
                *v = norm.apply(*v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preproc::CH_MOVEMENT;

    fn stack(values: impl Fn(usize, usize) -> f64) -> SpectrogramStack {
        let mut s = SpectrogramStack::zeros(2, 50);
        s.slow_rate = 20.0;
        for c in 0..CHANNELS {
            for r in 0..2 {
                for t in 0..50 {
                    s.set(c, r, t, values(c, r * 50 + t));
                }
            }
        }
        s
    }

    #[test]
    fn training_channels_are_standardised() {
        let s = stack(|c, i| if c == CH_DOPPLER { 0.3 } else { (1 + i * (c + 1)) as f64 * 1e-3 });
        let stats = NormStats::fit(&[&s]).unwrap();
        let z = stats.apply(&s);
        for c in [CH_MOVEMENT, 1] {
            let v = z.channel(c);
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
            assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "{c}: {m} {sd}");
        }
        assert!(z.channel(CH_DOPPLER).iter().all(|&v| (v - 0.03).abs() < 1e-12));
    }

    #[test]
    fn constant_channel_falls_back_to_unit_std() {
        let s = stack(|_, _| 2.0);
        let stats = NormStats::fit(&[&s]).unwrap();
        assert!(stats.zero_variance[CH_MOVEMENT]);
        assert_eq!(stats.channels[CH_MOVEMENT].std, 1.0);
        assert!(stats.apply(&s).channel(CH_MOVEMENT).iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn frozen_stats_then_identity_is_idempotent() {
        let train = stack(|c, i| (c + 1) as f64 * (1.0 + (i as f64 * 0.37).sin().abs()));
        let test = stack(|c, i| (c + 2) as f64 * (1.0 + (i as f64 * 0.11).cos().abs()));
        let stats = NormStats::fit(&[&train]).unwrap();
        let once = stats.apply(&test);
        assert_eq!(stats.apply(&test), once);
        assert_eq!(NormStats::identity().apply(&once), once);
    }
}
