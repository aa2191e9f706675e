use rand::Rng;

use super::profile::{PlannedEvent, SubjectProfile};
use crate::types::SpO2Trace;

/// Time of the desaturation nadir (whole second) for an event ending at
/// `t_end`.
pub fn nadir_time(t_end: f64, delay: f64, depth: u8, fall_rate: f64) -> usize {
    (t_end + delay + depth as f64 / fall_rate).ceil() as usize
}

/// 1 Hz SpO₂ trace for a profile whose planned events are `events`
/// (same order as `profile.od_coupling`).
///
/// Each coupled event produces a linear fall to `baseline − depth` reached
/// exactly at a whole second, followed by a linear rise back to baseline.
/// Overlapping desaturations combine by taking the deeper one.
pub fn synthesize_spo2<R: Rng + ?Sized>(
    profile: &SubjectProfile,
    events: &[PlannedEvent],
    rng: &mut R,
) -> SpO2Trace {
    let n = profile.duration.floor() as usize;
    let opts = profile.spo2;
    let baseline = opts.baseline.unwrap_or_else(|| rng.gen_range(95..=98));
    let mut deficit = vec![0.0f64; n];
    for (e, od) in events.iter().zip(&profile.od_coupling) {
        let Some(od) = od else { continue };
        let depth = od.depth as f64;
        let nadir = nadir_time(e.end(), od.delay, od.depth, opts.fall_rate) as f64;
        let fall = depth / opts.fall_rate;
        let rise = depth / opts.rise_rate;
        let k0 = (nadir - fall).floor().max(0.0) as usize;
        let k1 = ((nadir + rise).ceil() as usize).min(n);
        for (k, dk) in deficit.iter_mut().enumerate().take(k1).skip(k0) {
            let t = k as f64;
            let v = if t <= nadir {
                depth * (1.0 - (nadir - t) / fall)
            } else {
                depth * (1.0 - (t - nadir) / rise)
            };
            if v > *dk {
                *dk = v;
            }
        }
    }
    let mut samples: Vec<u8> = deficit
        .iter()
        .map(|&d| {
            let drop = (d - 1e-9).ceil().max(0.0);
            (baseline as f64 - drop) as u8
        })
        .collect();

    let hours = profile.duration / 3600.0;
    if opts.jitter_per_hour > 0.0 {
        let count = (opts.jitter_per_hour * hours).round() as usize;
        for _ in 0..count {
            let len = rng.gen_range(2..9usize);
            if n < len + 4 {
                break;
            }
            let start = rng.gen_range(2..n - len - 2);
            // Only on flat baseline so desaturation depths stay exact.
            if deficit[start - 2..start + len + 2].iter().all(|&d| d == 0.0) {
                for s in &mut samples[start..start + len] {
                    *s = baseline - 1;
                }
            }
        }
    }
    if opts.artifacts_per_hour > 0.0 {
        let count = (opts.artifacts_per_hour * hours).round() as usize;
        for _ in 0..count {
            let len = rng.gen_range(1..6usize);
            if n <= len {
                break;
            }
            let start = rng.gen_range(0..n - len);
            let v = if rng.gen::<bool>() { 0 } else { 255 };
            for s in &mut samples[start..start + len] {
                *s = v;
            }
        }
    }
    for a in &profile.artifact_plan {
        if a.t < n {
            samples[a.t] = a.value;
        }
    }
    SpO2Trace::from_raw(samples)
}
