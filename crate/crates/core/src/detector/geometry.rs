//! Interval arithmetic, anchors, offset coding and NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::score_order;
use crate::types::{DetectedSegment, EventKind};

/// `|a ∩ b| / |a ∪ b|`; zero-length or inverted intervals give 0.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (la, lb) = (a.1 - a.0, b.1 - b.0);
    if !(la > 0.0 && lb > 0.0) {
        return 0.0;
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / (la + lb - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Centre (s).
    pub center: f64,
    /// Width (s).
    pub width: f64,
    pub level: usize,
}

impl Anchor {
    pub fn interval(&self) -> (f64, f64) {
        (self.center - self.width / 2.0, self.center + self.width / 2.0)
    }
}

/// Anchors at every step of every level, ordered level-major, time-major,
/// scale-minor. Level `k` has `ceil(time_len / strides[k])` steps centred at
/// `(j + 0.5)·stride`.
pub fn generate_anchors(time_len: f64, strides: &[f64], scales: &[Vec<f64>]) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (level, (&stride, widths)) in strides.iter().zip(scales).enumerate() {
        if !(stride > 0.0) {
            continue;
        }
        let steps = (time_len / stride - 1e-9).ceil().max(0.0) as usize;
        for j in 0..steps {
            for &width in widths {
                out.push(Anchor {
                    center: (j as f64 + 0.5) * stride,
                    width,
                    level,
                });
            }
        }
    }
    out
}

/// `(t_x, t_w)` that move `(center, width)` onto `gt`.
pub fn encode_offsets(center: f64, width: f64, gt: (f64, f64)) -> Result<(f64, f64)> {
    let gw = gt.1 - gt.0;
    if !(width > 0.0 && gw > 0.0) {
        return Err(Error::invalid(format!(
            "encode_offsets: widths must be positive (reference {width}, target {gw})"
        )));
    }
    let gx = 0.5 * (gt.0 + gt.1);
    Ok(((gx - center) / width, (gw / width).ln()))
}

/// Centre `x + t_x·w`, width `w·exp(t_w)`.
pub fn decode_offsets(center: f64, width: f64, tx: f64, tw: f64) -> (f64, f64) {
    (center + tx * width, width * tw.exp())
}

/// Start and end of the decoded interval.
pub fn decode_interval(center: f64, width: f64, tx: f64, tw: f64) -> (f64, f64) {
    let (x, w) = decode_offsets(center, width, tx, tw);
    (x - w / 2.0, x + w / 2.0)
}

/// Result of decoding one region with the classifier output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoded {
    Segment(DetectedSegment),
    /// The most probable class is "no event".
    Background,
    /// Non-finite or empty interval after decoding.
    Degenerate,
}

/// Picks the most probable of the five classes (index 0 = no event) and
/// applies that class's offsets to the region `(center, width)`.
pub fn decode_segment(center: f64, width: f64, probs: &[f64], tx: &[f64], tw: &[f64]) -> Decoded {
    let mut c = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[c] {
            c = i;
        }
    }
    let Some(kind) = EventKind::from_class_index(c) else {
        return Decoded::Background;
    };
    let (x, w) = decode_offsets(center, width, tx[c], tw[c]);
    let (t_start, t_end) = (x - w / 2.0, x + w / 2.0);
    if !(t_end > t_start) || !t_start.is_finite() || !t_end.is_finite() {
        return Decoded::Degenerate;
    }
    Decoded::Segment(DetectedSegment {
        kind,
        score: probs[c],
        t_start,
        t_end,
    })
}

/// Greedy per-class non-maximum suppression. Segments below `score_thr` are
/// dropped; output is in descending score order.
pub fn nms_1d(segments: &[DetectedSegment], iou_thr: f64, score_thr: f64) -> Vec<DetectedSegment> {
    let mut sorted: Vec<_> = segments.iter().filter(|s| s.score >= score_thr).copied().collect();
    sorted.sort_by(score_order);
    let mut kept: Vec<DetectedSegment> = Vec::new();
    for s in sorted {
        if !kept
            .iter()
            .any(|k| k.kind == s.kind && iou_1d(k.interval(), s.interval()) >= iou_thr)
        {
            kept.push(s);
        }
    }
    kept
}

/// Class-agnostic NMS over scored intervals; returns kept indices in
/// descending score order, at most `limit`.
pub fn nms_intervals(intervals: &[(f64, f64)], scores: &[f64], iou_thr: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(intervals[a].0.total_cmp(&intervals[b].0))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= limit {
            break;
        }
        if !kept.iter().any(|&k| iou_1d(intervals[k], intervals[i]) >= iou_thr) {
            kept.push(i);
        }
    }
    kept
}
