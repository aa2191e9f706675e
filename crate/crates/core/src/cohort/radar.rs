use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// FMCW radar parameters.
///
/// `f0`, `bandwidth`, `chirp_duration`, `frame_rate` and `samples_per_chirp`
/// are the free parameters; wavelength and chirp slope are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    /// Carrier frequency (Hz).
    pub f0: f64,
    /// Sweep bandwidth (Hz).
    pub bandwidth: f64,
    /// Chirp duration (s).
    pub chirp_duration: f64,
    /// Chirps per second.
    pub frame_rate: f64,
    /// Samples per chirp.
    pub samples_per_chirp: u32,
    /// Propagation speed (m/s).
    pub c: f64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            f0: 60e9,
            bandwidth: 3e9,
            chirp_duration: 128e-6,
            frame_rate: 250.0,
            samples_per_chirp: 256,
            c: SPEED_OF_LIGHT,
        }
    }
}

impl RadarConfig {
    /// Reduced-rate configuration used for whole-night simulation.
    pub fn overnight() -> Self {
        Self {
            frame_rate: 20.0,
            samples_per_chirp: 64,
            ..Self::default()
        }
    }

    pub fn wavelength(&self) -> f64 {
        self.c / self.f0
    }

    /// Chirp slope `K = B / T_r` (Hz/s).
    pub fn slope(&self) -> f64 {
        self.bandwidth / self.chirp_duration
    }

    /// Fast-time sampling rate `n / T_r`.
    pub fn fast_sample_rate(&self) -> f64 {
        self.samples_per_chirp as f64 / self.chirp_duration
    }

    pub fn n(&self) -> usize {
        self.samples_per_chirp as usize
    }

    pub fn range_resolution(&self) -> f64 {
        self.c / (2.0 * self.bandwidth)
    }

    /// Largest range whose beat frequency `2KR/c` stays below the fast-time
    /// Nyquist frequency.
    pub fn max_unambiguous_range(&self) -> f64 {
        self.c * self.fast_sample_rate() / (4.0 * self.slope())
    }

    pub fn range_bins(&self) -> usize {
        self.n() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.samples_per_chirp;
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "samples per chirp must be a power of two >= 2, got {n}"
            )));
        }
        for (name, v) in [
            ("carrier frequency", self.f0),
            ("bandwidth", self.bandwidth),
            ("chirp duration", self.chirp_duration),
            ("frame rate", self.frame_rate),
            ("propagation speed", self.c),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.frame_rate * self.chirp_duration > 1.0 + 1e-12 {
            return Err(Error::invalid(format!(
                "frame rate {} Hz exceeds 1/T_r = {} Hz",
                self.frame_rate,
                1.0 / self.chirp_duration
            )));
        }
        Ok(())
    }
}

/// Complex beat samples, one contiguous chirp (fast time) per slow-time step.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSignalCube {
    pub samples_per_chirp: usize,
    pub chirps: usize,
    pub data: Vec<Complex<f32>>,
}

impl BeatSignalCube {
    pub fn zeros(samples_per_chirp: usize, chirps: usize) -> Self {
        Self {
            samples_per_chirp,
            chirps,
            data: vec![Complex::new(0.0, 0.0); samples_per_chirp * chirps],
        }
    }

    pub fn chirp(&self, t: usize) -> &[Complex<f32>] {
        &self.data[t * self.samples_per_chirp..(t + 1) * self.samples_per_chirp]
    }
}

/// Options for [`render_beat_signal`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Beat amplitude `A_b`.
    pub amplitude: f64,
    /// Per-sample signal-to-noise ratio in dB; `None` renders noise-free.
    pub snr_db: Option<f64>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            snr_db: Some(20.0),
        }
    }
}

/// Renders `A_b·exp(2πj(2K·R0/c·τ + 2(R0 + d[t] + m[t])/λ0))` per chirp,
/// plus complex white noise.
///
/// `displacement` and `movement` are sampled at the frame rate; `movement`
/// may be empty.
pub fn render_beat_signal<R: Rng + ?Sized>(
    config: &RadarConfig,
    r0: f64,
    displacement: &[f64],
    movement: &[f64],
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<BeatSignalCube> {
    config.validate()?;
    if !(r0 > 0.0) || r0 >= config.max_unambiguous_range() {
        return Err(Error::invalid(format!(
            "target range {r0} m outside the unambiguous range (0, {:.4}) m",
            config.max_unambiguous_range()
        )));
    }
    if !movement.is_empty() && movement.len() != displacement.len() {
        return Err(Error::shape(
            "render_beat_signal",
            format!(
                "displacement has {} samples, movement {}",
                displacement.len(),
                movement.len()
            ),
        ));
    }
    let n = config.n();
    let lambda = config.wavelength();
    let tau_step = 1.0 / config.fast_sample_rate();
    let beat_freq = 2.0 * config.slope() * r0 / config.c;
    // Fast-time phase ramp is the same for every chirp.
    let ramp: Vec<Complex<f64>> = (0..n)
        .map(|k| Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * beat_freq * k as f64 * tau_step))
        .collect();
    let noise_std = opts
        .snr_db
        .map(|snr| opts.amplitude * (0.5 * 10f64.powf(-snr / 10.0)).sqrt());
    let mut cube = BeatSignalCube::zeros(n, displacement.len());
    for (t, chunk) in cube.data.chunks_mut(n).enumerate() {
        let d = displacement[t] + movement.get(t).copied().unwrap_or(0.0);
        // Reduce the slow-time phase modulo 2π before forming the phasor so
        // precision does not depend on the absolute range.
        let cycles = 2.0 * (r0 + d) / lambda;
        let phase = 2.0 * std::f64::consts::PI * (cycles - cycles.floor());
        let rot = Complex::from_polar(opts.amplitude, phase);
        for (k, out) in chunk.iter_mut().enumerate() {
            let mut v = rot * ramp[k];
            if let Some(s) = noise_std {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                v += Complex::new(re * s, im * s);
            }
            *out = Complex::new(v.re as f32, v.im as f32);
        }
    }
    Ok(cube)
}
