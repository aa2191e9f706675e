//! Artifact masking and short-fluctuation flattening.

use crate::types::SpO2Trace;

/// Excursions shorter than this (s) are flattened.
pub const MIN_FLUCTUATION: usize = 10;

/// Masks 0/255 readings and flattens every excursion that leaves a level and
/// comes back to it within [`MIN_FLUCTUATION`] seconds. Masked samples are
/// skipped but still count as elapsed time. An excursion whose level is
/// flanked on both sides by values beyond it in the opposite direction is
/// the tip of a larger swing (the bottom of a desaturation) and is kept.
/// Repeated until nothing changes, so the result is a fixed point.
pub fn clean_trace(raw: &SpO2Trace) -> SpO2Trace {
    let mut out = raw.clone();
    for (v, s) in out.valid.iter_mut().zip(&out.samples) {
        *v = *v && *s != 0 && *s != 255;
    }
    while flatten_pass(&mut out) {}
    out
}

/// True when no sample is usable.
pub fn fully_invalid(trace: &SpO2Trace) -> bool {
    !trace.valid.iter().any(|&v| v)
}

fn flatten_pass(trace: &mut SpO2Trace) -> bool {
    let idx: Vec<usize> = (0..trace.len()).filter(|&i| trace.valid[i]).collect();
    let mut changed = false;
    let mut k = 0;
    while k + 1 < idx.len() {
        let level = trace.samples[idx[k]];
        if trace.samples[idx[k + 1]] == level {
            k += 1;
            continue;
        }
        let start = idx[k + 1];
        let back = (k + 2..idx.len())
            .take_while(|&j| idx[j] - start < MIN_FLUCTUATION)
            .find(|&j| trace.samples[idx[j]] == level);
        let Some(j) = back else {
            k += 1;
            continue;
        };
        let side = trace.samples[start] > level;
        let before = (0..k).rev().map(|m| trace.samples[idx[m]]).find(|&v| v != level);
        let after = (j..idx.len()).map(|m| trace.samples[idx[m]]).find(|&v| v != level);
        let opposite = |v: Option<u8>| v.is_some_and(|v| (v > level) != side);
        if opposite(before) && opposite(after) {
            k += 1;
            continue;
        }
        for &i in &idx[k + 1..j] {
            trace.samples[i] = level;
        }
        changed = true;
        k = j;
    }
    changed
}
