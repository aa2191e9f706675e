//! Desaturation segmentation, per-segment SpO₂ features and ODI₃.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SpO2Trace;

/// Desaturations at least this deep (%) count as significant.
pub const OD_THRESHOLD: f64 = 3.0;
/// Length of the search window after a segment (s).
pub const WINDOW: f64 = 60.0;
/// Windows with fewer remaining seconds are flagged as truncated.
pub const MIN_WINDOW: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpO2Features {
    /// Desaturation depth (%).
    pub p_od: f64,
    /// Resaturation rise after the nadir (%).
    pub p_or: f64,
    /// Fall slope (%/s, ≤ 0).
    pub v_od: f64,
    /// Rise slope (%/s, ≥ 0).
    pub v_or: f64,
}

impl SpO2Features {
    pub const ZERO: Self = Self {
        p_od: 0.0,
        p_or: 0.0,
        v_od: 0.0,
        v_or: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.p_od, self.p_or, self.v_od, self.v_or]
    }
}

/// Features for one segment, or the no-oximetry sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFeatures {
    /// `None` when the window holds no valid sample.
    pub features: Option<SpO2Features>,
    /// Fewer than [`MIN_WINDOW`] seconds of the window lie inside the trace.
    pub truncated: bool,
}

/// One fall from a local maximum to the next local minimum, with the rise
/// that follows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Desaturation {
    /// Last second at the onset level.
    pub onset: usize,
    /// First second at the nadir level.
    pub nadir: usize,
    /// First second at the next local maximum (the nadir when nothing rises).
    pub peak: usize,
    pub depth: f64,
    pub rise: f64,
}

impl Desaturation {
    pub fn features(&self) -> SpO2Features {
        let fall = (self.nadir - self.onset) as f64;
        let up = (self.peak - self.nadir) as f64;
        SpO2Features {
            p_od: self.depth,
            p_or: self.rise,
            v_od: if fall > 0.0 { -self.depth / fall } else { 0.0 },
            v_or: if up > 0.0 { self.rise / up } else { 0.0 },
        }
    }
}

/// Splits `(time, value)` samples (time-ordered) into desaturations.
pub fn segment_desaturations(samples: &[(usize, u8)]) -> Vec<Desaturation> {
    // Collapse runs of equal values into plateaus (first time, last time, value).
    let mut runs: Vec<(usize, usize, u8)> = Vec::new();
    for &(t, v) in samples {
        match runs.last_mut() {
            Some(r) if r.2 == v => r.1 = t,
            _ => runs.push((t, t, v)),
        }
    }
    let mut out = Vec::new();
    let mut k = 0;
    while k + 1 < runs.len() {
        if runs[k + 1].2 >= runs[k].2 {
            k += 1;
            continue;
        }
        let onset = k;
        let mut m = k + 1;
        while m + 1 < runs.len() && runs[m + 1].2 < runs[m].2 {
            m += 1;
        }
        let nadir = m;
        let mut p = m;
        while p + 1 < runs.len() && runs[p + 1].2 > runs[p].2 {
            p += 1;
        }
        out.push(Desaturation {
            onset: runs[onset].1,
            nadir: runs[nadir].0,
            peak: runs[p].0,
            depth: (runs[onset].2 - runs[nadir].2) as f64,
            rise: (runs[p].2 - runs[nadir].2) as f64,
        });
        k = nadir;
    }
    out
}

fn valid_samples(trace: &SpO2Trace, from: usize, to: usize) -> Vec<(usize, u8)> {
    (from..to.min(trace.len()))
        .filter(|&i| trace.valid[i])
        .map(|i| (i, trace.samples[i]))
        .collect()
}

/// Features of the first desaturation of at least 3 % in `(t_end, t_end + 60]`
/// (the deepest one when none reaches 3 %). Masked samples are ignored.
pub fn extract_features(trace: &SpO2Trace, t_end: f64) -> WindowFeatures {
    let from = (t_end.floor() + 1.0).max(0.0) as usize;
    let to = (t_end + WINDOW).floor().max(-1.0) as i64 + 1;
    let to = to.max(0) as usize;
    let inside = to.min(trace.len()).saturating_sub(from) as f64;
    let truncated = inside < MIN_WINDOW;
    let samples = valid_samples(trace, from, to);
    if samples.is_empty() {
        return WindowFeatures {
            features: None,
            truncated,
        };
    }
    let desats = segment_desaturations(&samples);
    let chosen = desats.iter().find(|d| d.depth >= OD_THRESHOLD).or_else(|| {
        desats
            .iter()
            .fold(None::<&Desaturation>, |best, d| match best {
                Some(b) if b.depth >= d.depth => Some(b),
                _ => Some(d),
            })
    });
    WindowFeatures {
        features: Some(chosen.map_or(SpO2Features::ZERO, Desaturation::features)),
        truncated,
    }
}

/// Number of desaturations of at least 3 % over the whole trace.
pub fn count_desaturations(trace: &SpO2Trace) -> usize {
    segment_desaturations(&valid_samples(trace, 0, trace.len()))
        .iter()
        .filter(|d| d.depth >= OD_THRESHOLD)
        .count()
}

/// Oxygen desaturation index: 3 % desaturations per hour of sleep.
pub fn odi3(trace: &SpO2Trace, tst_hours: f64) -> Result<f64> {
    if !(tst_hours > 0.0) {
        return Err(Error::NoSleep);
    }
    Ok(count_desaturations(trace) as f64 / tst_hours)
}
