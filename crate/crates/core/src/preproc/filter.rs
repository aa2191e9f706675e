//! Butterworth biquad cascades and zero-phase (forward-backward) filtering.

use std::f64::consts::PI;

use num_complex::Complex;

/// Second-order section, normalised so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &mut [Complex<f64>]) {
        let (mut z1, mut z2) = (Complex::new(0.0, 0.0), Complex::new(0.0, 0.0));
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let inp = *v;
            let out = inp * b0 + z1;
            z1 = inp * b1 - out * a1 + z2;
            z2 = inp * b2 - out * a2;
            *v = out;
        }
    }

    /// Complex frequency response at `f` for sample rate `fs`.
    pub fn response(&self, f: f64, fs: f64) -> Complex<f64> {
        let z1 = Complex::from_polar(1.0, -2.0 * PI * f / fs);
        let z2 = z1 * z1;
        let num = Complex::new(self.b[0], 0.0) + z1 * self.b[1] + z2 * self.b[2];
        let den = Complex::new(1.0, 0.0) + z1 * self.a[0] + z2 * self.a[1];
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// Cascade of biquads applied forward then backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroPhaseFilter {
    pub sections: Vec<Biquad>,
    /// Samples of odd-symmetric extension added on each side.
    pub pad: usize,
}

/// Digital Butterworth biquads of even `order` with cutoff `fc` (−3 dB for a
/// single pass), via the bilinear transform with frequency prewarping.
pub fn butterworth(kind: FilterKind, order: usize, fc: f64, fs: f64) -> Vec<Biquad> {
    assert!(order >= 2 && order % 2 == 0, "order must be even");
    assert!(fc > 0.0 && fc < fs / 2.0, "cutoff must lie inside (0, fs/2)");
    let w0 = 2.0 * PI * fc / fs;
    let (sw, cw) = w0.sin_cos();
    (0..order / 2)
        .map(|k| {
            let q = 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * order) as f64).sin());
            let alpha = sw / (2.0 * q);
            let a0 = 1.0 + alpha;
            let b = match kind {
                FilterKind::LowPass => [(1.0 - cw) / 2.0, 1.0 - cw, (1.0 - cw) / 2.0],
                FilterKind::HighPass => [(1.0 + cw) / 2.0, -(1.0 + cw), (1.0 + cw) / 2.0],
            };
            Biquad {
                b: [b[0] / a0, b[1] / a0, b[2] / a0],
                a: [-2.0 * cw / a0, (1.0 - alpha) / a0],
            }
        })
        .collect()
}

/// Design cutoff that places the −3 dB point of the forward-backward
/// (squared-magnitude) response at `fc`.
pub fn zero_phase_design_cutoff(kind: FilterKind, order: usize, fc: f64, fs: f64) -> f64 {
    // |H|² of one pass must be 1/√2 at fc: (Ω/Ω_d)^{2N} = √2 − 1 (low-pass),
    // with Ω = tan(πf/fs) the prewarped frequency.
    let r = (std::f64::consts::SQRT_2 - 1.0).powf(1.0 / (2 * order) as f64);
    let w = (PI * fc / fs).tan();
    let wd = match kind {
        FilterKind::LowPass => w / r,
        FilterKind::HighPass => w * r,
    };
    wd.atan() * fs / PI
}

impl ZeroPhaseFilter {
    pub fn high_pass(order: usize, fc: f64, fs: f64) -> Self {
        let fd = zero_phase_design_cutoff(FilterKind::HighPass, order, fc, fs);
        Self {
            sections: butterworth(FilterKind::HighPass, order, fd, fs),
            pad: (6.0 * fs / fc).ceil() as usize,
        }
    }

    pub fn low_pass(order: usize, fc: f64, fs: f64) -> Self {
        let fd = zero_phase_design_cutoff(FilterKind::LowPass, order, fc, fs);
        Self {
            sections: butterworth(FilterKind::LowPass, order, fd.min(0.499 * fs), fs),
            pad: (6.0 * fs / fc).ceil() as usize,
        }
    }

    /// High-pass at `lo` cascaded with low-pass at `hi`.
    pub fn band_pass(order: usize, lo: f64, hi: f64, fs: f64) -> Self {
        let mut hp = Self::high_pass(order, lo, fs);
        let lp = Self::low_pass(order, hi, fs);
        hp.sections.extend(lp.sections);
        hp.pad = hp.pad.max(lp.pad);
        hp
    }

    /// Squared magnitude of the zero-phase response at `f`.
    pub fn power_response(&self, f: f64, fs: f64) -> f64 {
        self.sections
            .iter()
            .map(|s| s.response(f, fs).norm_sqr())
            .product::<f64>()
            .powi(2)
    }

    pub fn apply(&self, x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = self.pad.min(n - 1);
        let mut buf = Vec::with_capacity(n + 2 * pad);
        let first = x[0];
        let last = x[n - 1];
        for k in (1..=pad).rev() {
            buf.push(first * 2.0 - x[k]);
        }
        buf.extend_from_slice(x);
        for k in 1..=pad {
            buf.push(last * 2.0 - x[n - 1 - k]);
        }
        for s in &self.sections {
            s.run(&mut buf);
        }
        buf.reverse();
        for s in &self.sections {
            s.run(&mut buf);
        }
        buf.reverse();
        buf[pad..pad + n].to_vec()
    }
}
