//! Range transform and the three-channel movement / breathing / Doppler
//! spectrogram stack.

pub mod filter;
mod norm;

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cohort::{BeatSignalCube, RadarConfig};
use crate::error::{Error, Result};
pub use filter::{ZeroPhaseFilter, FilterKind};
pub use norm::{ChannelNorm, NormStats};

/// Channel order inside a [`SpectrogramStack`].
pub const CH_MOVEMENT: usize = 0;
pub const CH_BREATHING: usize = 1;
pub const CH_DOPPLER: usize = 2;
pub const CHANNELS: usize = 3;

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos())
        .collect()
}

/// Complex range × slow-time matrix, stored range-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeTimeMatrix {
    pub range_bins: usize,
    pub steps: usize,
    pub values: Vec<Complex<f64>>,
    /// Metres per range bin.
    pub range_resolution: f64,
    /// Slow-time sample rate (Hz).
    pub slow_rate: f64,
}

impl RangeTimeMatrix {
    pub fn row(&self, r: usize) -> &[Complex<f64>] {
        &self.values[r * self.steps..(r + 1) * self.steps]
    }

    pub fn get(&self, r: usize, t: usize) -> Complex<f64> {
        self.values[r * self.steps + t]
    }

    pub fn duration(&self) -> f64 {
        self.steps as f64 / self.slow_rate
    }
}

/// Hann-windowed one-sided FFT of every chirp. The window is normalised by
/// its sum so a unit-amplitude tone centred on a bin has magnitude 1.
pub fn range_transform(beat: &BeatSignalCube, config: &RadarConfig) -> Result<RangeTimeMatrix> {
    config.validate()?;
    let n = config.n();
    if beat.samples_per_chirp != n || beat.data.len() != n * beat.chirps {
        return Err(Error::shape(
            "range_transform",
            format!(
                "cube has {} samples x {} chirps ({} values), config expects {n} per chirp",
                beat.samples_per_chirp,
                beat.chirps,
                beat.data.len()
            ),
        ));
    }
    if let Some(i) = beat.data.iter().position(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::NonFinite(format!(
            "beat signal sample {} of chirp {}",
            i % n,
            i / n
        )));
    }
    let half = n / 2;
    let window = hann(n);
    let norm: f64 = window.iter().sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = vec![Complex::new(0.0, 0.0); half * beat.chirps];
    for t in 0..beat.chirps {
        for ((b, s), w) in buf.iter_mut().zip(beat.chirp(t)).zip(&window) {
            *b = Complex::new(s.re as f64 * w, s.im as f64 * w);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (r, v) in buf[..half].iter().enumerate() {
            values[r * beat.chirps + t] = v / norm;
        }
    }
    Ok(RangeTimeMatrix {
        range_bins: half,
        steps: beat.chirps,
        values,
        range_resolution: config.range_resolution(),
        slow_rate: config.frame_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DopplerEstimator {
    /// Frequency of the strongest component.
    Argmax,
    /// Power-weighted mean frequency over the band.
    FirstMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    /// Frame length (s).
    pub frame_len: f64,
    /// Frame hop (s).
    pub frame_hop: f64,
    /// Kept range interval (m); `None` keeps every bin.
    pub range_gate: Option<(f64, f64)>,
    pub movement_cutoff: f64,
    pub breathing_band: (f64, f64),
    pub filter_order: usize,
    pub doppler: DopplerEstimator,
    /// Doppler is reported as 0 unless the spectral peak exceeds this many
    /// times the mean in-band power.
    pub doppler_peak_ratio: f64,
    /// Doppler is also reported as 0 when the breathing band holds less than
    /// this fraction of the bin's total power in the frame.
    pub doppler_min_modulation: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            frame_len: 30.0,
            frame_hop: 1.0,
            range_gate: Some((0.3, 1.5)),
            movement_cutoff: 5.0,
            breathing_band: (0.1, 5.0),
            filter_order: 4,
            doppler: DopplerEstimator::Argmax,
            doppler_peak_ratio: 10.0,
            doppler_min_modulation: 0.01,
        }
    }
}

impl PreprocConfig {
    /// Half-open range-bin window selected by the gate.
    pub fn range_window(&self, range_bins: usize, resolution: f64) -> (usize, usize) {
        match self.range_gate {
            None => (0, range_bins),
            Some((lo, hi)) => {
                let a = ((lo / resolution) - 1e-9).ceil().max(0.0) as usize;
                let b = (((hi / resolution) + 1e-9).floor() as usize + 1).min(range_bins);
                (a.min(b), b)
            }
        }
    }
}

/// `[x_M, x_B, x_D]`, each `range × frames`, stored channel-major then
/// range-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramStack {
    pub range_bins: usize,
    pub frames: usize,
    pub data: Vec<f64>,
    pub frame_hop: f64,
    pub frame_len: f64,
    /// Half-open bin interval of the original range axis.
    pub range_window: (usize, usize),
    pub slow_rate: f64,
    /// Set when frames are too short for a reliable Doppler estimate.
    pub degraded: bool,
}

impl SpectrogramStack {
    pub fn zeros(range_bins: usize, frames: usize) -> Self {
        Self {
            range_bins,
            frames,
            data: vec![0.0; CHANNELS * range_bins * frames],
            frame_hop: 1.0,
            frame_len: 1.0,
            range_window: (0, range_bins),
            slow_rate: 1.0,
            degraded: false,
        }
    }

    fn idx(&self, c: usize, r: usize, t: usize) -> usize {
        (c * self.range_bins + r) * self.frames + t
    }

    pub fn get(&self, c: usize, r: usize, t: usize) -> f64 {
        self.data[self.idx(c, r, t)]
    }

    pub fn set(&mut self, c: usize, r: usize, t: usize, v: f64) {
        let i = self.idx(c, r, t);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.range_bins * self.frames;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.range_bins * self.frames;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn row(&self, c: usize, r: usize) -> &[f64] {
        let i = self.idx(c, r, 0);
        &self.data[i..i + self.frames]
    }

    /// Time of the centre of frame `t` (s).
    pub fn frame_time(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.frame_hop
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * self.frame_hop
    }

    /// Frames `[start, start + len)` as a new stack; frames past the end are
    /// zero.
    pub fn slice_frames(&self, start: usize, len: usize) -> Self {
        let mut out = Self {
            frames: len,
            data: vec![0.0; CHANNELS * self.range_bins * len],
            ..self.clone()
        };
        for c in 0..CHANNELS {
            for r in 0..self.range_bins {
                for t in 0..len {
                    if start + t < self.frames {
                        out.set(c, r, t, self.get(c, r, start + t));
                    }
                }
            }
        }
        out
    }

    /// Averages consecutive frames into windows of `epoch_len` seconds.
    pub fn pool_epochs(&self, epoch_len: f64) -> Result<Self> {
        let per = (epoch_len / self.frame_hop).round() as usize;
        if per == 0 || ((per as f64) * self.frame_hop - epoch_len).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "epoch length {epoch_len} s is not a multiple of the frame hop {} s",
                self.frame_hop
            )));
        }
        let epochs = self.frames.div_ceil(per);
        let mut out = Self {
            frames: epochs,
            frame_hop: epoch_len,
            data: vec![0.0; CHANNELS * self.range_bins * epochs],
            ..self.clone()
        };
        for c in 0..CHANNELS {
            for r in 0..self.range_bins {
                let row = self.row(c, r);
                for e in 0..epochs {
                    let seg = &row[e * per..((e + 1) * per).min(self.frames)];
                    out.set(c, r, e, seg.iter().sum::<f64>() / seg.len() as f64);
                }
            }
        }
        Ok(out)
    }
}

/// Frames every range bin of `rtm` into movement power, breathing power and
/// dominant breathing frequency.
pub fn compute_spectrogram_stack(rtm: &RangeTimeMatrix, config: &PreprocConfig) -> Result<SpectrogramStack> {
    let fs = rtm.slow_rate;
    if fs <= 2.0 * config.movement_cutoff.max(config.breathing_band.1) {
        return Err(Error::invalid(format!(
            "slow-time rate {fs} Hz cannot represent a {} Hz band edge",
            config.movement_cutoff.max(config.breathing_band.1)
        )));
    }
    if !(config.frame_hop > 0.0 && config.frame_len > 0.0) {
        return Err(Error::invalid("frame length and hop must be positive"));
    }
    let (lo, hi) = config.breathing_band;
    if !(lo > 0.0 && lo < hi) {
        return Err(Error::invalid(format!("breathing band ({lo}, {hi}) is empty")));
    }
    let degraded = config.frame_len < 2.0 / lo;
    if degraded {
        log::warn!(
            "frame length {} s is shorter than {} s; Doppler estimate is unreliable",
            config.frame_len,
            2.0 / lo
        );
    }
    let (r_lo, r_hi) = config.range_window(rtm.range_bins, rtm.range_resolution);
    let bins = r_hi - r_lo;
    let frame_samples = (config.frame_len * fs).round() as usize;
    let hop_samples = config.frame_hop * fs;
    let frames = (rtm.duration() / config.frame_hop + 1e-9).floor() as usize;
    if frame_samples < 2 {
        return Err(Error::invalid("frame shorter than two slow-time samples"));
    }

    let hp = ZeroPhaseFilter::high_pass(config.filter_order, config.movement_cutoff, fs);
    let bp = ZeroPhaseFilter::band_pass(config.filter_order, lo, hi, fs);
    let window = hann(frame_samples);
    let w2: Vec<f64> = window.iter().map(|w| w * w).collect();
    let w2_sum: f64 = w2.iter().sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame_samples);
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf = vec![Complex::new(0.0, 0.0); frame_samples];
    let df = fs / frame_samples as f64;
    let k_lo = (lo / df).ceil() as usize;
    let k_hi = ((hi / df).floor() as usize).min((frame_samples - 1) / 2);
    let mut folded = vec![0.0; k_hi + 1];

    let mut stack = SpectrogramStack {
        range_bins: bins,
        frames,
        data: vec![0.0; CHANNELS * bins * frames],
        frame_hop: config.frame_hop,
        frame_len: config.frame_len,
        range_window: (r_lo, r_hi),
        slow_rate: fs,
        degraded,
    };
    let n = rtm.steps as isize;
    for (ri, r) in (r_lo..r_hi).enumerate() {
        let row = rtm.row(r);
        let moving = hp.apply(row);
        let breathing = bp.apply(row);
        for t in 0..frames {
            let centre = (t as f64 + 0.5) * hop_samples;
            let start = (centre - frame_samples as f64 / 2.0).round() as isize;
            let (mut pm, mut pr) = (0.0, 0.0);
            for (k, w) in w2.iter().enumerate() {
                let i = start + k as isize;
                if i >= 0 && i < n {
                    pm += w * moving[i as usize].norm_sqr();
                    pr += w * row[i as usize].norm_sqr();
                }
            }
            for (k, (b, w)) in buf.iter_mut().zip(&window).enumerate() {
                let i = start + k as isize;
                *b = if i >= 0 && i < n {
                    breathing[i as usize] * *w
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            let pb = buf.iter().map(|z| z.norm_sqr()).sum::<f64>() / w2_sum;
            fft.process_with_scratch(&mut buf, &mut scratch);
            for k in k_lo..=k_hi {
                folded[k] = buf[k].norm_sqr() + buf[frame_samples - k].norm_sqr();
            }
            let doppler = if pb * w2_sum < config.doppler_min_modulation * pr {
                0.0
            } else {
                dominant_frequency(&folded[k_lo..=k_hi], k_lo, df, config)
            };
            stack.set(CH_MOVEMENT, ri, t, pm / w2_sum);
            stack.set(CH_BREATHING, ri, t, pb);
            stack.set(CH_DOPPLER, ri, t, doppler);
        }
    }
    Ok(stack)
}

/// `band[j]` holds the folded power at frequency `(k0 + j)·df`.
fn dominant_frequency(band: &[f64], k0: usize, df: f64, config: &PreprocConfig) -> f64 {
    if band.is_empty() {
        return 0.0;
    }
    let total: f64 = band.iter().sum();
    let mean = total / band.len() as f64;
    let (jmax, &peak) = band
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    if !(peak > 0.0) || peak < config.doppler_peak_ratio * mean {
        return 0.0;
    }
    match config.doppler {
        DopplerEstimator::Argmax => (k0 + jmax) as f64 * df,
        DopplerEstimator::FirstMoment => {
            band.iter()
                .enumerate()
                .map(|(j, p)| (k0 + j) as f64 * df * p)
                .sum::<f64>()
                / total
        }
    }
}

/// Shape descriptor written next to a spectrogram dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub dtype: String,
    /// `[channel, range, frame]`.
    pub shape: [usize; 3],
    pub frame_hop: f64,
    pub frame_len: f64,
    pub range_window: (usize, usize),
    pub slow_rate: f64,
    pub degraded: bool,
}

/// Writes `<stem>.bin` (little-endian f64) and `<stem>.json`.
pub fn write_dump(stack: &SpectrogramStack, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = DumpHeader {
        dtype: "f64-le".into(),
        shape: [CHANNELS, stack.range_bins, stack.frames],
        frame_hop: stack.frame_hop,
        frame_len: stack.frame_len,
        range_window: stack.range_window,
        slow_rate: stack.slow_rate,
        degraded: stack.degraded,
    };
    let bytes: Vec<u8> = stack.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&header)? + "\n",
    )?;
    Ok(())
}

pub fn read_dump(dir: &Path, stem: &str) -> Result<SpectrogramStack> {
    let header: DumpHeader = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if header.dtype != "f64-le" || header.shape[0] != CHANNELS {
        return Err(Error::Format(format!(
            "unsupported dump {} with shape {:?}",
            header.dtype, header.shape
        )));
    }
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let expect = header.shape.iter().product::<usize>() * 8;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "dump holds {} bytes, header implies {expect}",
            bytes.len()
        )));
    }
    Ok(SpectrogramStack {
        range_bins: header.shape[1],
        frames: header.shape[2],
        data: bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        frame_hop: header.frame_hop,
        frame_len: header.frame_len,
        range_window: header.range_window,
        slow_rate: header.slow_rate,
        degraded: header.degraded,
    })
}
