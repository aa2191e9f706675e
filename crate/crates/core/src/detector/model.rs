//! Segment detector: residual pyramid backbone, segment proposal network
//! and region head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::geometry::{decode_interval, decode_segment, encode_offsets, generate_anchors, iou_1d, nms_1d, nms_intervals, Anchor, Decoded};
use crate::autodiff::{load_checkpoint, save_checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::preproc::{SpectrogramStack, CHANNELS};
use crate::types::{AnnotatedEvent, DetectedSegment, EventKind};

pub const NUM_CLASSES: usize = 5;
pub const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangePool {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub stem_channels: usize,
    pub level_channels: [usize; LEVELS],
    pub feature_dim: usize,
    /// Anchor widths (s) per pyramid level; every level needs the same count.
    pub anchor_widths: [Vec<f64>; LEVELS],
    pub range_pool: RangePool,
    pub roi_bins: usize,
    pub head_hidden: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub spn_batch: usize,
    pub spn_pos_fraction: f64,
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub pre_nms_top: usize,
    pub proposal_nms_iou: f64,
    pub proposals: usize,
    pub nms_iou: f64,
    pub score_threshold: f64,
    /// Inference chunk length (s).
    pub chunk_len: f64,
    pub chunk_overlap: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            level_channels: [16, 32, 64],
            feature_dim: 32,
            anchor_widths: [
                vec![10.0, 15.0, 22.0],
                vec![30.0, 45.0, 65.0],
                vec![90.0, 130.0, 180.0],
            ],
            range_pool: RangePool::Mean,
            roi_bins: 7,
            head_hidden: 64,
            pos_iou: 0.5,
            neg_iou: 0.3,
            spn_batch: 128,
            spn_pos_fraction: 0.5,
            roi_batch: 64,
            roi_pos_fraction: 0.25,
            pre_nms_top: 300,
            proposal_nms_iou: 0.7,
            proposals: 64,
            nms_iou: 0.5,
            score_threshold: 0.05,
            chunk_len: 600.0,
            chunk_overlap: 60.0,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_step(&self) -> usize {
        self.anchor_widths[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.anchors_per_step();
        if a == 0 || self.anchor_widths.iter().any(|w| w.len() != a || w.iter().any(|&x| !(x > 0.0))) {
            return Err(Error::invalid("every pyramid level needs the same non-empty set of positive anchor widths"));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::invalid("matching thresholds must satisfy 0 <= neg <= pos <= 1"));
        }
        if !(self.chunk_len > 0.0 && self.chunk_overlap >= 0.0 && self.chunk_overlap < self.chunk_len) {
            return Err(Error::invalid("chunk overlap must be shorter than the chunk"));
        }
        if self.roi_bins == 0 || self.feature_dim == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn max_anchor_width(&self) -> f64 {
        self.anchor_widths.iter().flatten().fold(0.0, |m, &w| m.max(w))
    }

    /// Level whose anchor widths best match `width` on a log scale.
    pub fn level_for_width(&self, width: f64) -> usize {
        let lw = width.max(1e-9).ln();
        (0..LEVELS)
            .min_by(|&a, &b| {
                let ca = self.level_centre(a);
                let cb = self.level_centre(b);
                (lw - ca).abs().total_cmp(&(lw - cb).abs())
            })
            .unwrap_or(0)
    }

    fn level_centre(&self, k: usize) -> f64 {
        let w = &self.anchor_widths[k];
        w.iter().map(|x| x.ln()).sum::<f64>() / w.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Block {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    skip: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: [Block; LEVELS],
    lateral: [(ParamId, ParamId); LEVELS],
    spn1: (ParamId, ParamId),
    spn2: (ParamId, ParamId),
    head1: (ParamId, ParamId),
    head2: (ParamId, ParamId),
}

/// A trained (or freshly initialised) detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub params: ParamSet,
    /// Head cross-entropy weights for `[none, CA, OA, MA, HP]`.
    pub class_weights: [f64; NUM_CLASSES],
    ids: Ids,
}

/// Pyramid features and SPN output for one chunk.
pub struct Features {
    /// `[feature_dim, len_k]` per level.
    pub levels: [Var; LEVELS],
    /// `[anchors, 3]`: objectness logit, `t_x`, `t_w`, in anchor order.
    pub spn: Var,
    pub anchors: Vec<Anchor>,
    /// Seconds per step at each level.
    pub strides: [f64; LEVELS],
    /// Chunk duration (s).
    pub duration: f64,
}

/// Sampled training targets for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPlan {
    pub spn_rows: Vec<usize>,
    pub spn_labels: Vec<f64>,
    /// `(anchor, [t_x, t_w])` for positive anchors.
    pub spn_reg: Vec<(usize, [f64; 2])>,
    pub rois: Vec<(f64, f64)>,
    pub roi_labels: Vec<usize>,
    /// `(roi row, class, [t_x, t_w])` for positive regions.
    pub roi_reg: Vec<(usize, usize, [f64; 2])>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub spn_cls: f64,
    pub spn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.spn_cls + self.spn_reg + self.head_cls + self.head_reg
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectOutput {
    pub segments: Vec<DetectedSegment>,
    /// Chunks shorter than the widest anchor, left unprocessed.
    pub skipped_chunks: usize,
    /// Regions whose decoded interval was empty or non-finite.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: DetectorConfig,
    class_weights: [f64; NUM_CLASSES],
}

impl DetectorModel {
    pub fn new<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamSet::new();
        let c0 = config.stem_channels;
        let stem_w = p.add_he("stem.w", &[c0, CHANNELS, 3, 3], CHANNELS * 9, rng);
        let stem_b = p.add_zeros("stem.b", &[c0]);
        let mut cin = c0;
        let mut blocks = Vec::with_capacity(LEVELS);
        for (k, &cout) in config.level_channels.iter().enumerate() {
            blocks.push(Block {
                w1: p.add_he(format!("level{k}.conv1.w"), &[cout, cin, 3], cin * 3, rng),
                b1: p.add_zeros(format!("level{k}.conv1.b"), &[cout]),
                w2: p.add_he(format!("level{k}.conv2.w"), &[cout, cout, 3], cout * 3, rng),
                b2: p.add_zeros(format!("level{k}.conv2.b"), &[cout]),
                skip: p.add_he(format!("level{k}.skip.w"), &[cout, cin, 1], cin, rng),
            });
            cin = cout;
        }
        let d = config.feature_dim;
        let lateral: Vec<_> = config
            .level_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                (
                    p.add_he(format!("lateral{k}.w"), &[d, c, 1], c, rng),
                    p.add_zeros(format!("lateral{k}.b"), &[d]),
                )
            })
            .collect();
        let a = config.anchors_per_step();
        let spn1 = (p.add_he("spn.conv.w", &[d, d, 3], d * 3, rng), p.add_zeros("spn.conv.b", &[d]));
        let spn2_w = p.add("spn.out.w", Tensor::randn(&[3 * a, d, 1], 0.01, rng));
        let mut spn2_bias = Tensor::zeros(&[3 * a]);
        for j in 0..a {
            // Start with a low objectness prior so most anchors read as negative.
            spn2_bias.data_mut()[3 * j] = -2.0;
        }
        let spn2 = (spn2_w, p.add("spn.out.b", spn2_bias));
        let fin = d * config.roi_bins;
        let head1 = (
            p.add_he("head.fc1.w", &[config.head_hidden, fin], fin, rng),
            p.add_zeros("head.fc1.b", &[config.head_hidden]),
        );
        let head2 = (
            p.add("head.fc2.w", Tensor::randn(&[3 * NUM_CLASSES, config.head_hidden], 0.01, rng)),
            p.add_zeros("head.fc2.b", &[3 * NUM_CLASSES]),
        );
        let ids = Ids {
            stem_w,
            stem_b,
            blocks: [blocks[0], blocks[1], blocks[2]],
            lateral: [lateral[0], lateral[1], lateral[2]],
            spn1,
            spn2,
            head1,
            head2,
        };
        Ok(Self {
            config,
            params: p,
            class_weights: [1.0; NUM_CLASSES],
            ids,
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: DetectorConfig) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut m = Self::new(config, &mut rng)?;
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    /// Builds pyramid features and SPN output for a chunk of frames.
    pub fn features(&self, tape: &mut Tape, vars: &[Var], chunk: &SpectrogramStack) -> Result<Features> {
        if chunk.frames == 0 || chunk.range_bins == 0 {
            return Err(Error::shape("detector", "empty chunk"));
        }
        let v = |id: ParamId| vars[id.0];
        let ids = &self.ids;
        let x = tape.constant(Tensor::new(
            vec![CHANNELS, chunk.range_bins, chunk.frames],
            chunk.data.clone(),
        )?);
        let s = tape.conv2d(x, v(ids.stem_w), Some(v(ids.stem_b)), (1, 2), (1, 1))?;
        let s = tape.relu(s);
        let pooled = match self.config.range_pool {
            RangePool::Mean => tape.mean_axis(s, 1)?,
            RangePool::Max => tape.max_axis(s, 1)?,
        };
        let len = tape.shape(pooled)[1];
        let mut h = tape.reshape(pooled, &[1, self.config.stem_channels, len])?;
        let mut levels = Vec::with_capacity(LEVELS);
        let mut spn_rows = Vec::with_capacity(LEVELS);
        let a = self.config.anchors_per_step();
        for k in 0..LEVELS {
            let b = &ids.blocks[k];
            let y = tape.conv1d(h, v(b.w1), Some(v(b.b1)), 2, 1)?;
            let y = tape.relu(y);
            let y = tape.conv1d(y, v(b.w2), Some(v(b.b2)), 1, 1)?;
            let sk = tape.conv1d(h, v(b.skip), None, 2, 0)?;
            let y = tape.add(y, sk)?;
            h = tape.relu(y);
            let (lw, lb) = ids.lateral[k];
            let p = tape.conv1d(h, v(lw), Some(v(lb)), 1, 0)?;
            let q = tape.conv1d(p, v(ids.spn1.0), Some(v(ids.spn1.1)), 1, 1)?;
            let q = tape.relu(q);
            let o = tape.conv1d(q, v(ids.spn2.0), Some(v(ids.spn2.1)), 1, 0)?;
            let lk = tape.shape(p)[2];
            let p2 = tape.reshape(p, &[self.config.feature_dim, lk])?;
            levels.push(p2);
            let o = tape.reshape(o, &[3 * a, lk])?;
            let o = tape.transpose(o)?;
            spn_rows.push(tape.reshape(o, &[lk * a, 3])?);
        }
        let spn = tape.concat(&spn_rows, 0)?;
        let duration = chunk.frames as f64 * chunk.frame_hop;
        let strides = [0, 1, 2].map(|k| (1usize << (k + 2)) as f64 * chunk.frame_hop);
        let anchors = generate_anchors(duration, &strides, &self.config.anchor_widths);
        if anchors.len() != tape.shape(spn)[0] {
            return Err(Error::shape(
                "detector",
                format!("{} anchors for {} SPN rows", anchors.len(), tape.shape(spn)[0]),
            ));
        }
        Ok(Features {
            levels: [levels[0], levels[1], levels[2]],
            spn,
            anchors,
            strides,
            duration,
        })
    }

    /// Region head output `[rois, 15]`: five class logits, five `t_x`, five
    /// `t_w`.
    pub fn head(&self, tape: &mut Tape, vars: &[Var], feats: &Features, rois: &[(f64, f64)]) -> Result<Var> {
        let v = |id: ParamId| vars[id.0];
        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rois.len());
        for k in 0..LEVELS {
            let idx: Vec<usize> = (0..rois.len())
                .filter(|&i| self.config.level_for_width(rois[i].1 - rois[i].0) == k)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let stride = feats.strides[k];
            let coords: Vec<(f64, f64)> = idx
                .iter()
                .map(|&i| (rois[i].0 / stride - 0.5, rois[i].1 / stride - 0.5))
                .collect();
            parts.push(tape.roi_align_1d(feats.levels[k], &coords, self.config.roi_bins)?);
            order.extend(idx);
        }
        if parts.is_empty() {
            return Err(Error::shape("detector head", "no regions"));
        }
        let pooled = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let mut inverse = vec![0; rois.len()];
        for (row, &i) in order.iter().enumerate() {
            inverse[i] = row;
        }
        let pooled = tape.gather_rows(pooled, &inverse)?;
        let h = tape.linear(pooled, v(self.ids.head1.0), Some(v(self.ids.head1.1)))?;
        let h = tape.relu(h);
        tape.linear(h, v(self.ids.head2.0), Some(v(self.ids.head2.1)))
    }

    /// Decoded SPN proposals in chunk time, best first.
    pub fn proposals(&self, tape: &Tape, feats: &Features) -> Vec<(f64, f64)> {
        let spn = tape.value(feats.spn).data();
        let mut cands = Vec::with_capacity(feats.anchors.len());
        let mut scores = Vec::with_capacity(feats.anchors.len());
        for (i, a) in feats.anchors.iter().enumerate() {
            let (obj, tx, tw) = (spn[3 * i], spn[3 * i + 1], spn[3 * i + 2]);
            let (s, e) = decode_interval(a.center, a.width, tx, tw.clamp(-4.0, 4.0));
            let (s, e) = (s.max(0.0), e.min(feats.duration));
            if e - s >= 1.0 && obj.is_finite() {
                cands.push((s, e));
                scores.push(obj);
            }
        }
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(self.config.pre_nms_top);
        let top: Vec<(f64, f64)> = order.iter().map(|&i| cands[i]).collect();
        let top_scores: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
        nms_intervals(&top, &top_scores, self.config.proposal_nms_iou, self.config.proposals)
            .into_iter()
            .map(|i| top[i])
            .collect()
    }

    /// Samples anchor and region targets for `events` (chunk time).
    pub fn plan_targets<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        feats: &Features,
        events: &[AnnotatedEvent],
        rng: &mut R,
    ) -> Result<TargetPlan> {
        let cfg = &self.config;
        let gts: Vec<(f64, f64)> = events.iter().map(|e| e.interval()).collect();
        let n_anchor = feats.anchors.len();
        let mut best = vec![(0.0f64, usize::MAX); n_anchor];
        for (i, a) in feats.anchors.iter().enumerate() {
            for (g, gt) in gts.iter().enumerate() {
                let iou = iou_1d(a.interval(), *gt);
                if iou > best[i].0 {
                    best[i] = (iou, g);
                }
            }
        }
        let mut label = vec![-1i8; n_anchor];
        for i in 0..n_anchor {
            if best[i].0 >= cfg.pos_iou {
                label[i] = 1;
            } else if best[i].0 < cfg.neg_iou {
                label[i] = 0;
            }
        }
        for (g, gt) in gts.iter().enumerate() {
            let mut top: Option<(usize, f64)> = None;
            for (i, a) in feats.anchors.iter().enumerate() {
                let iou = iou_1d(a.interval(), *gt);
                if iou > 0.0 && top.is_none_or(|(_, b)| iou > b) {
                    top = Some((i, iou));
                }
            }
            if let Some((i, _)) = top {
                label[i] = 1;
                best[i].1 = g;
            }
        }
        let mut pos: Vec<usize> = (0..n_anchor).filter(|&i| label[i] == 1).collect();
        let mut neg: Vec<usize> = (0..n_anchor).filter(|&i| label[i] == 0).collect();
        let max_pos = ((cfg.spn_batch as f64) * cfg.spn_pos_fraction).round() as usize;
        pos.shuffle(rng);
        pos.truncate(max_pos);
        neg.shuffle(rng);
        neg.truncate(cfg.spn_batch.saturating_sub(pos.len()));
        let mut spn_rows = pos.clone();
        spn_rows.extend(&neg);
        let mut spn_labels = vec![1.0; pos.len()];
        spn_labels.extend(std::iter::repeat_n(0.0, neg.len()));
        let spn_reg = pos
            .iter()
            .map(|&i| {
                let a = feats.anchors[i];
                let (tx, tw) = encode_offsets(a.center, a.width, gts[best[i].1])?;
                Ok((i, [tx, tw]))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut rois = self.proposals(tape, feats);
        rois.extend(gts.iter().filter(|g| g.1 - g.0 > 0.0));
        let mut rpos = Vec::new();
        let mut rneg = Vec::new();
        for (r, roi) in rois.iter().enumerate() {
            let mut top = (0.0, usize::MAX);
            for (g, gt) in gts.iter().enumerate() {
                let iou = iou_1d(*roi, *gt);
                if iou > top.0 {
                    top = (iou, g);
                }
            }
            if top.0 >= cfg.pos_iou {
                rpos.push((r, top.1));
            } else if top.0 < cfg.neg_iou {
                rneg.push(r);
            }
        }
        let max_rpos = ((cfg.roi_batch as f64) * cfg.roi_pos_fraction).round() as usize;
        rpos.shuffle(rng);
        rpos.truncate(max_rpos);
        rneg.shuffle(rng);
        rneg.truncate(cfg.roi_batch.saturating_sub(rpos.len()));
        let mut sampled = Vec::with_capacity(rpos.len() + rneg.len());
        let mut roi_labels = Vec::with_capacity(sampled.capacity());
        let mut roi_reg = Vec::with_capacity(rpos.len());
        for &(r, g) in &rpos {
            let roi = rois[r];
            let class = events[g].kind.class_index();
            let (tx, tw) = encode_offsets(0.5 * (roi.0 + roi.1), roi.1 - roi.0, gts[g])?;
            roi_reg.push((sampled.len(), class, [tx, tw]));
            sampled.push(roi);
            roi_labels.push(class);
        }
        for &r in &rneg {
            sampled.push(rois[r]);
            roi_labels.push(0);
        }
        Ok(TargetPlan {
            spn_rows,
            spn_labels,
            spn_reg,
            rois: sampled,
            roi_labels,
            roi_reg,
        })
    }

    /// Detection loss for one chunk. `plan` fixes the sampled targets; when
    /// absent a fresh plan is drawn from `rng`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        chunk: &SpectrogramStack,
        events: &[AnnotatedEvent],
        plan: Option<&TargetPlan>,
        rng: &mut R,
    ) -> Result<(Var, LossParts, TargetPlan)> {
        let feats = self.features(tape, vars, chunk)?;
        let plan = match plan {
            Some(p) => p.clone(),
            None => self.plan_targets(tape, &feats, events, rng)?,
        };
        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        if !plan.spn_rows.is_empty() {
            let rows = tape.gather_rows(feats.spn, &plan.spn_rows)?;
            let obj = tape.pick(rows, &vec![0; plan.spn_rows.len()])?;
            let l = tape.bce_with_logits(obj, &plan.spn_labels, None)?;
            parts.spn_cls = tape.value(l).item();
            terms.push(l);
        }
        if !plan.spn_reg.is_empty() {
            let idx: Vec<usize> = plan.spn_reg.iter().map(|r| r.0).collect();
            let rows = tape.gather_rows(feats.spn, &idx)?;
            let off = tape.slice(rows, 1, 1, 2)?;
            let target: Vec<f64> = plan.spn_reg.iter().flat_map(|r| r.1).collect();
            let l = tape.smooth_l1(off, &target)?;
            let l = tape.scale(l, 1.0 / plan.spn_reg.len() as f64);
            parts.spn_reg = tape.value(l).item();
            terms.push(l);
        }
        if !plan.rois.is_empty() {
            let out = self.head(tape, vars, &feats, &plan.rois)?;
            let logits = tape.slice(out, 1, 0, NUM_CLASSES)?;
            let l = tape.cross_entropy(logits, &plan.roi_labels, Some(&self.class_weights))?;
            parts.head_cls = tape.value(l).item();
            terms.push(l);
            if !plan.roi_reg.is_empty() {
                let rows: Vec<usize> = plan.roi_reg.iter().map(|r| r.0).collect();
                let cls: Vec<usize> = plan.roi_reg.iter().map(|r| r.1).collect();
                let sel = tape.gather_rows(out, &rows)?;
                let tx = tape.slice(sel, 1, NUM_CLASSES, NUM_CLASSES)?;
                let tw = tape.slice(sel, 1, 2 * NUM_CLASSES, NUM_CLASSES)?;
                let tx = tape.pick(tx, &cls)?;
                let tw = tape.pick(tw, &cls)?;
                let both = tape.concat(&[tx, tw], 0)?;
                let mut target: Vec<f64> = plan.roi_reg.iter().map(|r| r.2[0]).collect();
                target.extend(plan.roi_reg.iter().map(|r| r.2[1]));
                let l = tape.smooth_l1(both, &target)?;
                let l = tape.scale(l, 1.0 / plan.roi_reg.len() as f64);
                parts.head_reg = tape.value(l).item();
                terms.push(l);
            }
        }
        let mut total = match terms.first() {
            Some(&t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        for &t in terms.iter().skip(1) {
            total = tape.add(total, t)?;
        }
        Ok((total, parts, plan))
    }

    /// Detections for one chunk, in chunk time, after per-class NMS.
    pub fn detect_chunk(&self, chunk: &SpectrogramStack) -> Result<(Vec<DetectedSegment>, usize)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
        let feats = self.features(&mut tape, &vars, chunk)?;
        let rois = self.proposals(&tape, &feats);
        if rois.is_empty() {
            return Ok((Vec::new(), 0));
        }
        let out = self.head(&mut tape, &vars, &feats, &rois)?;
        let out = tape.value(out).data().to_vec();
        let stride = 3 * NUM_CLASSES;
        let mut segs = Vec::new();
        let mut degenerate = 0;
        for (r, roi) in rois.iter().enumerate() {
            let row = &out[r * stride..(r + 1) * stride];
            let mut probs = row[..NUM_CLASSES].to_vec();
            crate::autodiff::softmax_in_place(&mut probs);
            let center = 0.5 * (roi.0 + roi.1);
            let width = roi.1 - roi.0;
            match decode_segment(
                center,
                width,
                &probs,
                &row[NUM_CLASSES..2 * NUM_CLASSES],
                &row[2 * NUM_CLASSES..],
            ) {
                Decoded::Segment(mut s) => {
                    s.t_start = s.t_start.max(0.0);
                    s.t_end = s.t_end.min(feats.duration);
                    if s.t_end > s.t_start {
                        segs.push(s);
                    } else {
                        degenerate += 1;
                    }
                }
                Decoded::Background => {}
                Decoded::Degenerate => degenerate += 1,
            }
        }
        Ok((
            nms_1d(&segs, self.config.nms_iou, self.config.score_threshold),
            degenerate,
        ))
    }

    /// Frame offsets of the inference chunks covering `frames` frames.
    pub fn chunk_starts(&self, frames: usize, frame_hop: f64) -> (usize, Vec<usize>) {
        let len = (self.config.chunk_len / frame_hop).round() as usize;
        let step = ((self.config.chunk_len - self.config.chunk_overlap) / frame_hop).round().max(1.0) as usize;
        if frames <= len {
            return (frames, vec![0]);
        }
        let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + len < frames).collect();
        starts.push(frames - len);
        starts.dedup();
        (len, starts)
    }

    /// Whole-night inference over a normalised stack.
    pub fn detect_events(&self, stack: &SpectrogramStack) -> Result<DetectOutput> {
        let (len, starts) = self.chunk_starts(stack.frames, stack.frame_hop);
        let mut out = DetectOutput::default();
        if (len as f64) * stack.frame_hop < self.config.max_anchor_width() {
            out.skipped_chunks = starts.len();
            log::warn!(
                "recording of {} s is shorter than the widest anchor; nothing detected",
                stack.duration()
            );
            return Ok(out);
        }
        let mut per_chunk = Vec::with_capacity(starts.len());
        for &s in &starts {
            let chunk = stack.slice_frames(s, len);
            let (segs, deg) = self.detect_chunk(&chunk)?;
            out.degenerate += deg;
            per_chunk.push((s as f64 * stack.frame_hop, segs));
        }
        out.segments = merge_chunk_detections(per_chunk, self.config.nms_iou, self.config.score_threshold);
        Ok(out)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        save_checkpoint(&self.params, dir, stem)?;
        let meta = ModelMeta {
            config: self.config.clone(),
            class_weights: self.class_weights,
        };
        std::fs::write(
            dir.join(format!("{stem}.model.json")),
            serde_json::to_string_pretty(&meta)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.model.json")))?)?;
        let mut model = Self::zeroed(meta.config)?;
        let params = load_checkpoint(dir, stem)?;
        crate::autodiff::checkpoint::restore_into(&mut model.params, &params)?;
        model.class_weights = meta.class_weights;
        Ok(model)
    }
}

/// Shifts per-chunk detections by their chunk offsets and suppresses
/// duplicates from overlapping chunks. Output is sorted by start time.
pub fn merge_chunk_detections(
    per_chunk: Vec<(f64, Vec<DetectedSegment>)>,
    nms_iou: f64,
    score_threshold: f64,
) -> Vec<DetectedSegment> {
    let all: Vec<DetectedSegment> = per_chunk
        .into_iter()
        .flat_map(|(offset, segs)| {
            segs.into_iter().map(move |mut d| {
                d.t_start += offset;
                d.t_end += offset;
                d
            })
        })
        .collect();
    let mut merged = nms_1d(&all, nms_iou, score_threshold);
    merged.sort_by(|a, b| a.t_start.total_cmp(&b.t_start).then(b.score.total_cmp(&a.score)));
    merged
}

/// Events overlapping frames `[start, start + len)` by at least half their
/// duration, clipped and shifted into chunk time.
pub fn events_in_chunk(events: &[AnnotatedEvent], start: f64, len: f64) -> Vec<AnnotatedEvent> {
    events
        .iter()
        .filter_map(|e| {
            let a = e.t_start.max(start);
            let b = e.t_end.min(start + len);
            (b - a >= 0.5 * e.duration() && b > a).then(|| AnnotatedEvent {
                kind: e.kind,
                t_start: a - start,
                t_end: b - start,
            })
        })
        .collect()
}

/// Event-class index for a head label, `None` for background.
pub fn label_kind(label: usize) -> Option<EventKind> {
    EventKind::from_class_index(label)
}
