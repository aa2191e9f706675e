//! Average precision at an IoU threshold.

use crate::detector::iou_1d;
use crate::types::{AnnotatedEvent, DetectedSegment, EventKind};

/// One recording's detections and ground truth.
#[derive(Debug, Clone, Copy)]
pub struct ApInput<'a> {
    pub detections: &'a [DetectedSegment],
    pub truths: &'a [AnnotatedEvent],
}

/// Descending score; ties broken by earlier start, then earlier end.
pub fn score_order(a: &DetectedSegment, b: &DetectedSegment) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.t_start.total_cmp(&b.t_start))
        .then(a.t_end.total_cmp(&b.t_end))
        .then(a.kind.cmp(&b.kind))
}

/// True-positive flag for every detection of one recording, in
/// [`score_order`]. Each detection claims the unmatched truth of the same
/// class with the highest IoU, provided that IoU reaches `iou_thr`.
pub fn greedy_match(detections: &[DetectedSegment], truths: &[AnnotatedEvent], iou_thr: f64) -> Vec<(DetectedSegment, bool)> {
    let mut dets = detections.to_vec();
    dets.sort_by(score_order);
    let mut used = vec![false; truths.len()];
    dets.into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, t) in truths.iter().enumerate() {
                if used[i] || t.kind != d.kind {
                    continue;
                }
                let iou = iou_1d(d.interval(), t.interval());
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// All-points interpolated AP from detections ranked by score.
/// Returns `None` when there is no ground truth.
fn envelope_ap(mut ranked: Vec<(DetectedSegment, bool)>, n_truth: usize) -> Option<f64> {
    if n_truth == 0 {
        return None;
    }
    ranked.sort_by(|a, b| score_order(&a.0, &b.0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut hit = Vec::with_capacity(ranked.len());
    for (k, (_, is_tp)) in ranked.iter().enumerate() {
        tp += *is_tp as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        hit.push(*is_tp);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let ap = hit
        .iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .fold(0.0, |acc, (_, p)| acc + p)
        / n_truth as f64;
    Some(ap)
}

/// AP over several recordings. With `class = Some(c)` only class `c`
/// detections and truths are considered; with `None` every class is pooled
/// into one ranked list (matches still require equal classes).
pub fn average_precision(inputs: &[ApInput<'_>], iou_thr: f64, class: Option<EventKind>) -> Option<f64> {
    let keep = |k: EventKind| class.is_none_or(|c| c == k);
    let mut ranked = Vec::new();
    let mut n_truth = 0;
    for inp in inputs {
        let dets: Vec<_> = inp.detections.iter().filter(|d| keep(d.kind)).copied().collect();
        let truths: Vec<_> = inp.truths.iter().filter(|t| keep(t.kind)).copied().collect();
        n_truth += truths.len();
        ranked.extend(greedy_match(&dets, &truths, iou_thr));
    }
    envelope_ap(ranked, n_truth)
}

/// Overall AP plus AP for each event class.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ApSummary {
    pub overall: Option<f64>,
    pub per_class: Vec<(EventKind, Option<f64>)>,
}

pub fn ap_summary(inputs: &[ApInput<'_>], iou_thr: f64) -> ApSummary {
    ApSummary {
        overall: average_precision(inputs, iou_thr, None),
        per_class: EventKind::ALL
            .iter()
            .map(|&k| (k, average_precision(inputs, iou_thr, Some(k))))
            .collect(),
    }
}
