//! Event-type classifier on SpO₂ features and soft fusion of its score with
//! the radar detection score.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, SpO2Features, WINDOW};
use crate::autodiff::checkpoint::restore_into;
use crate::autodiff::{
    load_checkpoint, save_checkpoint, softmax_in_place, Adam, AdamState, ParamId, ParamSet, StepOutcome, Tape,
    Tensor, TrainConfig, Var,
};
use crate::detector::iou_1d;
use crate::error::{Error, Result};
use crate::metrics::score_order;
use crate::types::{AnnotatedEvent, DetectedSegment, Hypnogram, SpO2Trace};

/// Non-SAE plus the four event types.
pub const FUSION_CLASSES: usize = 5;
pub const FEATURES: usize = 4;
/// Event-free windows keep at least this distance (s) from every event.
pub const EVENT_CLEARANCE: f64 = 90.0;
pub const OMEGA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_OMEGA: f64 = 0.5;

/// One training night: cleaned trace, reference events and hypnogram.
#[derive(Debug, Clone, Copy)]
pub struct FusionSubject<'a> {
    pub trace: &'a SpO2Trace,
    pub events: &'a [AnnotatedEvent],
    pub hypnogram: &'a Hypnogram,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionDataset {
    pub features: Vec<[f64; FEATURES]>,
    /// 0 for event-free windows, otherwise the event class index.
    pub labels: Vec<usize>,
    /// Event-free windows had to be drawn with replacement.
    pub with_replacement: bool,
    /// Events whose window held no valid SpO₂ sample.
    pub skipped_events: usize,
}

impl FusionDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `p_od,p_or,v_od,v_or,label` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("p_od,p_or,v_od,v_or,label\n");
        for (f, l) in self.features.iter().zip(&self.labels) {
            let _ = writeln!(out, "{},{},{},{},{l}", f[0], f[1], f[2], f[3]);
        }
        out
    }
}

fn clear_of_events(t: f64, events: &[AnnotatedEvent]) -> bool {
    let (a, b) = (t, t + WINDOW);
    events
        .iter()
        .all(|e| e.t_start - b >= EVENT_CLEARANCE || a - e.t_end >= EVENT_CLEARANCE)
}

/// Features of every reference event plus an equal number of event-free
/// windows drawn uniformly from sleep time.
pub fn build_fusion_dataset(subjects: &[FusionSubject<'_>], seed: u64) -> Result<FusionDataset> {
    let mut ds = FusionDataset::default();
    for s in subjects {
        for e in s.events {
            match extract_features(s.trace, e.t_end).features {
                Some(f) => {
                    ds.features.push(f.to_array());
                    ds.labels.push(e.kind.class_index());
                }
                None => ds.skipped_events += 1,
            }
        }
    }
    let wanted = ds.len();
    if wanted == 0 {
        return Ok(ds);
    }
    // Candidate window starts: whole seconds in sleep, fully inside the
    // trace, with at least one valid sample.
    let mut candidates: Vec<(usize, f64)> = Vec::new();
    for (k, s) in subjects.iter().enumerate() {
        let mut valid_prefix = vec![0usize; s.trace.len() + 1];
        for (i, &v) in s.trace.valid.iter().enumerate() {
            valid_prefix[i + 1] = valid_prefix[i] + v as usize;
        }
        let last = s.trace.len().saturating_sub(WINDOW as usize + 1);
        for t in 0..last {
            let tf = t as f64;
            let asleep = s.hypnogram.stage_at(tf).is_some_and(|st| st.is_sleep());
            let has_valid = valid_prefix[t + 1 + WINDOW as usize] > valid_prefix[t + 1];
            if asleep && has_valid && clear_of_events(tf, s.events) {
                candidates.push((k, tf));
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no event-free sleep window for the non-SAE class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if candidates.len() >= wanted {
        let mut p = sample(&mut rng, candidates.len(), wanted).into_vec();
        p.sort_unstable();
        p
    } else {
        log::warn!(
            "only {} event-free windows for {wanted} events; sampling with replacement",
            candidates.len()
        );
        ds.with_replacement = true;
        (0..wanted).map(|_| rng.gen_range(0..candidates.len())).collect()
    };
    for i in picks {
        let (k, t) = candidates[i];
        let f = extract_features(subjects[k].trace, t).features.unwrap_or(SpO2Features::ZERO);
        ds.features.push(f.to_array());
        ds.labels.push(0);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    l1: (ParamId, ParamId),
    l2: (ParamId, ParamId),
    l3: (ParamId, ParamId),
}

/// Three dense layers, 4 → 16 → 16 → 5, with ReLU between them. Inputs are
/// standardised with statistics fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionNet {
    pub params: ParamSet,
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
    pub trained: bool,
    ids: Ids,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusionTrainReport {
    pub loss: Vec<f64>,
    pub skipped_steps: usize,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetMeta {
    mean: [f64; FEATURES],
    std: [f64; FEATURES],
    trained: bool,
}

pub const HIDDEN: usize = 16;

impl FusionNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = ParamSet::new();
        let l1 = (p.add_he("l1.w", &[HIDDEN, FEATURES], FEATURES, rng), p.add_zeros("l1.b", &[HIDDEN]));
        let l2 = (p.add_he("l2.w", &[HIDDEN, HIDDEN], HIDDEN, rng), p.add_zeros("l2.b", &[HIDDEN]));
        let l3 = (
            p.add_he("l3.w", &[FUSION_CLASSES, HIDDEN], HIDDEN, rng),
            p.add_zeros("l3.b", &[FUSION_CLASSES]),
        );
        Self {
            params: p,
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
            trained: false,
            ids: Ids { l1, l2, l3 },
        }
    }

    fn standardise(&self, rows: &[[f64; FEATURES]]) -> Result<Tensor> {
        let data = rows
            .iter()
            .flat_map(|r| (0..FEATURES).map(move |j| (r[j] - self.mean[j]) / self.std[j]))
            .collect();
        Tensor::new(vec![rows.len(), FEATURES], data)
    }

    /// Logits `[n, 5]` for standardised inputs `[n, 4]`.
    pub fn logits(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let v = |id: ParamId| vars[id.0];
        let ids = &self.ids;
        let h = tape.linear(x, v(ids.l1.0), Some(v(ids.l1.1)))?;
        let h = tape.relu(h);
        let h = tape.linear(h, v(ids.l2.0), Some(v(ids.l2.1)))?;
        let h = tape.relu(h);
        tape.linear(h, v(ids.l3.0), Some(v(ids.l3.1)))
    }

    /// Full-batch cross-entropy training with Adam and cosine annealing.
    pub fn train(&mut self, data: &FusionDataset, config: &TrainConfig) -> Result<FusionTrainReport> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("fusion dataset is empty"));
        }
        let n = data.len() as f64;
        for j in 0..FEATURES {
            let mean = data.features.iter().map(|f| f[j]).sum::<f64>() / n;
            let var = data.features.iter().map(|f| (f[j] - mean).powi(2)).sum::<f64>() / n;
            self.mean[j] = mean;
            self.std[j] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let x = self.standardise(&data.features)?;
        let mut adam = Adam::new(config.adam);
        adam.non_finite = config.non_finite;
        let mut state = AdamState::new(&self.params);
        let mut report = FusionTrainReport::default();
        for epoch in 0..config.epochs {
            let mut tape = Tape::new();
            let vars = self.params.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = self.logits(&mut tape, &vars, xv)?;
            let loss = tape.cross_entropy(y, &data.labels, None)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                log::warn!("fusion training diverged at epoch {epoch}");
                report.diverged = true;
                break;
            }
            tape.backward(loss)?;
            let grads = self.params.collect_grads(&tape, &vars);
            if adam.step(&mut self.params, &grads, &mut state, config.schedule.lr(epoch))?
                == StepOutcome::SkippedNonFinite
            {
                report.skipped_steps += 1;
            }
            report.loss.push(value);
        }
        self.trained = true;
        Ok(report)
    }

    /// Class probabilities for one feature vector.
    pub fn probabilities(&self, f: &SpO2Features) -> Result<[f64; FUSION_CLASSES]> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let x = self.standardise(&[f.to_array()])?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let xv = tape.constant(x);
        let y = self.logits(&mut tape, &vars, xv)?;
        let mut p = [0.0; FUSION_CLASSES];
        p.copy_from_slice(tape.value(y).data());
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// SpO₂-based event score: one minus the non-SAE probability.
    pub fn score(&self, f: &SpO2Features) -> Result<f64> {
        Ok(score_from_probabilities(&self.probabilities(f)?))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_checkpoint(&self.params, dir, stem)?;
        let meta = NetMeta {
            mean: self.mean,
            std: self.std,
            trained: self.trained,
        };
        std::fs::write(dir.join(format!("{stem}.model.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: NetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.model.json")))?)?;
        let mut net = Self::new(&mut ChaCha8Rng::seed_from_u64(0));
        restore_into(&mut net.params, &load_checkpoint(dir, stem)?)?;
        net.mean = meta.mean;
        net.std = meta.std;
        net.trained = meta.trained;
        Ok(net)
    }
}

pub fn score_from_probabilities(p: &[f64; FUSION_CLASSES]) -> f64 {
    (1.0 - p[0]).clamp(0.0, 1.0)
}

/// `ω·p_s + (1 − ω)·p_r`.
pub fn fuse_score(p_r: f64, p_s: f64, omega: f64) -> f64 {
    omega * p_s + (1.0 - omega) * p_r
}

/// A detection after fusion; `segment.score` holds the fused score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub segment: DetectedSegment,
    pub p_r: f64,
    /// `None` when the SpO₂ window held no valid sample.
    pub p_s: Option<f64>,
}

/// Rescores detections with SpO₂ evidence, then re-thresholds and re-runs
/// per-class NMS on the fused score. Result is sorted by start time.
pub fn soft_fuse(
    detections: &[DetectedSegment],
    trace: &SpO2Trace,
    net: &FusionNet,
    omega: f64,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<FusedDetection>> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::invalid(format!("fusion weight {omega} outside [0, 1]")));
    }
    if !net.trained {
        return Err(Error::Untrained);
    }
    let mut fused = detections
        .iter()
        .map(|d| {
            let p_s = match extract_features(trace, d.t_end).features {
                Some(f) => Some(net.score(&f)?),
                None => None,
            };
            let p_f = p_s.map_or(d.score, |s| fuse_score(d.score, s, omega));
            Ok(FusedDetection {
                segment: DetectedSegment { score: p_f, ..*d },
                p_r: d.score,
                p_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fused.retain(|f| f.segment.score >= score_threshold);
    fused.sort_by(|a, b| score_order(&a.segment, &b.segment));
    let mut kept: Vec<FusedDetection> = Vec::new();
    for f in fused {
        let s = &f.segment;
        if !kept
            .iter()
            .any(|k| k.segment.kind == s.kind && iou_1d(k.segment.interval(), s.interval()) >= nms_iou)
        {
            kept.push(f);
        }
    }
    kept.sort_by(|a, b| a.segment.t_start.total_cmp(&b.segment.t_start));
    Ok(kept)
}

/// Grid value with the highest validation metric; ties go to the smaller ω.
pub fn tune_omega(grid: &[f64], mut metric: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &w in grid {
        let m = metric(w)?;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((w, m));
        }
    }
    best.ok_or_else(|| Error::invalid("empty fusion weight grid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_from_probabilities_examples() {
        assert_eq!(score_from_probabilities(&[1.0, 0.0, 0.0, 0.0, 0.0]), 0.0);
        assert_eq!(score_from_probabilities(&[0.0, 0.25, 0.25, 0.25, 0.25]), 1.0);
    }

    #[test]
    fn untrained_net_is_rejected() {
        let net = FusionNet::new(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(net.score(&SpO2Features::ZERO), Err(Error::Untrained)));
    }
}
