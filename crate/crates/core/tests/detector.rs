use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepradar_core::autodiff::{grad_check, Tape};
use sleepradar_core::detector::{
    decode_interval, encode_offsets, iou_1d, merge_chunk_detections, nms_1d, train_detector, DetectorConfig,
    DetectorModel, DetectorSample, DetectorTrainConfig,
};
use sleepradar_core::metrics::{average_precision, ApInput};
use sleepradar_core::preproc::{SpectrogramStack, CHANNELS, CH_BREATHING, CH_DOPPLER};
use sleepradar_core::{AnnotatedEvent, DetectedSegment, EventKind};

fn seg(kind: EventKind, score: f64, a: f64, b: f64) -> DetectedSegment {
    DetectedSegment {
        kind,
        score,
        t_start: a,
        t_end: b,
    }
}

fn ev(kind: EventKind, a: f64, b: f64) -> AnnotatedEvent {
    AnnotatedEvent {
        kind,
        t_start: a,
        t_end: b,
    }
}

fn kind_strategy() -> impl Strategy<Value = EventKind> {
    prop::sample::select(EventKind::ALL.to_vec())
}

fn seg_strategy() -> impl Strategy<Value = DetectedSegment> {
    (kind_strategy(), 0.0..1.0f64, 0.0..100.0f64, 1.0..30.0f64).prop_map(|(k, s, a, w)| seg(k, s, a, a + w))
}

/// Independent AP: greedy matching by score, then the sum over recall steps
/// of the best precision achievable at that recall or beyond.
fn oracle_ap(inputs: &[(Vec<DetectedSegment>, Vec<AnnotatedEvent>)], thr: f64) -> Option<f64> {
    let n_truth: usize = inputs.iter().map(|i| i.1.len()).sum();
    if n_truth == 0 {
        return None;
    }
    let mut flags: Vec<(f64, f64, f64, EventKind, bool)> = Vec::new();
    for (dets, truths) in inputs {
        let mut d = dets.clone();
        d.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.t_start.partial_cmp(&b.t_start).unwrap())
                .then(a.t_end.partial_cmp(&b.t_end).unwrap())
                .then(a.kind.cmp(&b.kind))
        });
        let mut taken = vec![false; truths.len()];
        for x in d {
            let cand = truths
                .iter()
                .enumerate()
                .filter(|(i, t)| !taken[*i] && t.kind == x.kind)
                .map(|(i, t)| (i, iou_1d((x.t_start, x.t_end), (t.t_start, t.t_end))))
                .filter(|&(_, o)| o >= thr)
                .fold(None::<(usize, f64)>, |acc, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            if let Some((i, _)) = cand {
                taken[i] = true;
            }
            flags.push((x.score, x.t_start, x.t_end, x.kind, cand.is_some()));
        }
    }
    flags.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then(a.2.partial_cmp(&b.2).unwrap())
            .then(a.3.cmp(&b.3))
    });
    let n = flags.len();
    let mut prec = vec![0.0; n];
    let mut rec = vec![0.0; n];
    let mut tp = 0;
    for k in 0..n {
        if flags[k].4 {
            tp += 1;
        }
        prec[k] = tp as f64 / (k + 1) as f64;
        rec[k] = tp as f64 / n_truth as f64;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..n {
        if rec[k] > prev {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += (rec[k] - prev) * best;
            prev = rec[k];
        }
    }
    Some(ap)
}

#[test]
fn ap_hand_example() {
    // Ranked: TP, FP, TP with two truths: precision 1, 1/2, 2/3.
    let dets = vec![
        seg(EventKind::OA, 0.9, 0.0, 10.0),
        seg(EventKind::OA, 0.8, 50.0, 60.0),
        seg(EventKind::OA, 0.7, 100.0, 110.0),
    ];
    let truths = vec![ev(EventKind::OA, 0.0, 10.0), ev(EventKind::OA, 101.0, 110.0)];
    let ap = average_precision(
        &[ApInput {
            detections: &dets,
            truths: &truths,
        }],
        0.5,
        None,
    )
    .unwrap();
    assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12, "{ap}");
}

#[test]
fn ap_without_truth_is_undefined() {
    let dets = vec![seg(EventKind::OA, 0.9, 0.0, 10.0)];
    let ap = average_precision(
        &[ApInput {
            detections: &dets,
            truths: &[],
        }],
        0.5,
        None,
    );
    assert_eq!(ap, None);
}

proptest! {
    #[test]
    fn ap_matches_oracle(
        recs in prop::collection::vec(
            (prop::collection::vec(seg_strategy(), 0..12),
             prop::collection::vec((kind_strategy(), 0.0..100.0f64, 10.0..30.0f64)
                .prop_map(|(k, a, w)| ev(k, a, a + w)), 0..6)),
            1..4),
        thr in prop::sample::select(vec![0.3, 0.5, 0.7]),
    ) {
        let inputs: Vec<ApInput> = recs.iter().map(|(d, t)| ApInput { detections: d, truths: t }).collect();
        let got = average_precision(&inputs, thr, None);
        let want = oracle_ap(&recs, thr);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w),
            other => prop_assert!(false, "{:?}", other),
        }
        if let Some(g) = got {
            prop_assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn nms_output_is_a_maximal_non_overlapping_subset(
        segs in prop::collection::vec(seg_strategy(), 0..25),
        thr in 0.1..0.9f64,
        score_thr in 0.0..0.5f64,
    ) {
        let kept = nms_1d(&segs, thr, score_thr);
        for k in &kept {
            prop_assert!(segs.contains(k));
            prop_assert!(k.score >= score_thr);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.kind != b.kind || iou_1d(a.interval(), b.interval()) < thr);
            }
        }
        for s in segs.iter().filter(|s| s.score >= score_thr && !kept.contains(s)) {
            prop_assert!(kept.iter().any(|k| k.kind == s.kind
                && k.score >= s.score
                && iou_1d(k.interval(), s.interval()) >= thr));
        }
        for w in kept.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn offset_coding_round_trips(
        c in -50.0..500.0f64, w in 1.0..200.0f64,
        a in -50.0..500.0f64, gw in 1.0..200.0f64,
    ) {
        let (tx, tw) = encode_offsets(c, w, (a, a + gw)).unwrap();
        let (s, e) = decode_interval(c, w, tx, tw);
        prop_assert!((s - a).abs() < 1e-9 * (1.0 + a.abs()));
        prop_assert!((e - (a + gw)).abs() < 1e-9 * (1.0 + a.abs() + gw));
    }
}

#[test]
fn encode_rejects_empty_intervals() {
    assert!(encode_offsets(10.0, 5.0, (3.0, 3.0)).is_err());
    assert!(encode_offsets(10.0, 0.0, (3.0, 4.0)).is_err());
}

fn tiny_config() -> DetectorConfig {
    DetectorConfig {
        stem_channels: 2,
        level_channels: [3, 3, 4],
        feature_dim: 3,
        anchor_widths: [vec![4.0, 6.0], vec![8.0, 12.0], vec![16.0, 24.0]],
        roi_bins: 3,
        head_hidden: 4,
        spn_batch: 16,
        roi_batch: 8,
        pre_nms_top: 20,
        proposals: 6,
        chunk_len: 64.0,
        chunk_overlap: 8.0,
        ..DetectorConfig::default()
    }
}

/// Synthetic normalised stack: unit noise everywhere, breathing power drops
/// and Doppler shifts during events (shift sign depends on class).
fn toy_stack(frames: usize, range: usize, events: &[AnnotatedEvent], rng: &mut ChaCha8Rng) -> SpectrogramStack {
    let mut s = SpectrogramStack::zeros(range, frames);
    s.slow_rate = 20.0;
    for c in 0..CHANNELS {
        for r in 0..range {
            for t in 0..frames {
                s.set(c, r, t, 0.3 * rng.gen_range(-1.0..1.0));
            }
        }
    }
    for e in events {
        let (a, b) = (e.t_start as usize, (e.t_end as usize).min(frames));
        for t in a..b {
            for r in 0..range {
                let v = s.get(CH_BREATHING, r, t);
                s.set(CH_BREATHING, r, t, v - 2.5);
                let d = s.get(CH_DOPPLER, r, t);
                let shift = if e.kind == EventKind::HP { 1.5 } else { -1.5 };
                s.set(CH_DOPPLER, r, t, d + shift);
            }
        }
    }
    s
}

fn toy_events(frames: usize, rng: &mut ChaCha8Rng) -> Vec<AnnotatedEvent> {
    let mut out = Vec::new();
    let mut t = 20.0 + rng.gen_range(0.0..30.0);
    while t + 60.0 < frames as f64 {
        let w = rng.gen_range(12.0..40.0);
        let kind = if rng.gen_bool(0.5) { EventKind::OA } else { EventKind::HP };
        out.push(ev(kind, t.floor(), (t + w).floor()));
        t += w + rng.gen_range(30.0..90.0);
    }
    out
}

#[test]
fn detection_loss_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = DetectorModel::new(tiny_config(), &mut rng).unwrap();
    let events = vec![ev(EventKind::OA, 10.0, 22.0), ev(EventKind::HP, 40.0, 48.0)];
    let chunk = toy_stack(64, 3, &events, &mut rng);
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let (_, parts, plan) = model.loss(&mut tape, &vars, &chunk, &events, None, &mut rng).unwrap();
    assert!(!plan.spn_reg.is_empty() && !plan.roi_reg.is_empty(), "{plan:?}");
    assert!(parts.total().is_finite());
    let report = grad_check(
        |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            model.loss(t, v, &chunk, &events, Some(&plan), &mut r).map(|x| x.0)
        },
        model.params.tensors(),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "max {:e}, worst {:?}", report.overall_max(), &report.worst[..3]);
}

#[test]
fn zero_model_detects_nothing() {
    let model = DetectorModel::zeroed(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stack = toy_stack(200, 3, &[ev(EventKind::OA, 50.0, 70.0)], &mut rng);
    let out = model.detect_events(&stack).unwrap();
    assert!(out.segments.is_empty());
    assert_eq!(out.skipped_chunks, 0);
}

#[test]
fn short_recording_is_skipped() {
    let model = DetectorModel::zeroed(tiny_config()).unwrap();
    let stack = SpectrogramStack::zeros(3, 20);
    let out = model.detect_events(&stack).unwrap();
    assert!(out.segments.is_empty());
    assert_eq!(out.skipped_chunks, 1);
}

#[test]
fn chunks_cover_the_night_and_end_aligned() {
    let model = DetectorModel::zeroed(DetectorConfig::default()).unwrap();
    let (len, starts) = model.chunk_starts(1500, 1.0);
    assert_eq!(len, 600);
    assert_eq!(starts, vec![0, 540, 900]);
    let (len, starts) = model.chunk_starts(400, 1.0);
    assert_eq!((len, starts), (400, vec![0]));
}

#[test]
fn event_straddling_a_chunk_boundary_is_reported_once() {
    // Chunks start at 0 and 540 s; the event at 560..590 s lies in both.
    let a = seg(EventKind::OA, 0.9, 560.0, 590.0);
    let b = seg(EventKind::OA, 0.8, 20.5, 50.5);
    let other = seg(EventKind::HP, 0.7, 100.0, 120.0);
    let merged = merge_chunk_detections(vec![(0.0, vec![a, other]), (540.0, vec![b])], 0.5, 0.05);
    assert_eq!(merged.len(), 2);
    assert_eq!(merged[1], a);
    assert_eq!(merged[0], other);
}

fn toy_cohort(n: usize, frames: usize, seed: u64) -> Vec<(SpectrogramStack, Vec<AnnotatedEvent>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let e = toy_events(frames, &mut rng);
            (toy_stack(frames, 4, &e, &mut rng), e)
        })
        .collect()
}

fn toy_train_config(epochs: usize, seed: u64) -> DetectorTrainConfig {
    let mut c = DetectorTrainConfig::default();
    c.optim = sleepradar_core::autodiff::TrainConfig::new(3e-3, epochs, seed);
    c.steps_per_epoch = 8;
    c.eval_every = epochs;
    c
}

fn toy_model_config() -> DetectorConfig {
    DetectorConfig {
        chunk_len: 300.0,
        chunk_overlap: 60.0,
        ..DetectorConfig::default()
    }
}

#[test]
fn training_halves_the_loss_on_a_toy_cohort() {
    let cohort = toy_cohort(4, 900, 11);
    let samples: Vec<DetectorSample> = cohort
        .iter()
        .map(|(s, e)| DetectorSample { stack: s, events: e })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = DetectorModel::new(toy_model_config(), &mut rng).unwrap();
    let report = train_detector(&mut model, &samples[..3], &samples[3..], &toy_train_config(40, 3)).unwrap();
    assert!(!report.diverged);
    let first: f64 = report.epoch_loss[..3].iter().sum::<f64>() / 3.0;
    let last: f64 = report.epoch_loss[report.epoch_loss.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(last <= 0.5 * first, "loss {first:.3} -> {last:.3}");
    let (_, ap) = report.val_ap.last().copied().unwrap();
    eprintln!("toy loss {first:.3} -> {last:.3}, AP {ap:.3}");
    assert!(ap > 0.3, "toy validation AP {ap}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let cohort = toy_cohort(2, 400, 5);
    let samples: Vec<DetectorSample> = cohort
        .iter()
        .map(|(s, e)| DetectorSample { stack: s, events: e })
        .collect();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = DetectorModel::new(toy_model_config(), &mut rng).unwrap();
        let r = train_detector(&mut m, &samples, &[], &toy_train_config(3, 1)).unwrap();
        (m.params, r.epoch_loss)
    };
    assert_eq!(run(), run());
}

#[test]
fn model_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = DetectorModel::new(tiny_config(), &mut rng).unwrap();
    m.class_weights = [1.0, 2.0, 0.5, 3.0, 1.5];
    m.save(dir.path(), "det").unwrap();
    let back = DetectorModel::load(dir.path(), "det").unwrap();
    assert_eq!(back, m);
}
