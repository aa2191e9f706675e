//! End-to-end acceptance run: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when
//! cargo captures test output; exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sleepradar_core::autodiff::{grad_check, load_checkpoint, save_checkpoint, Tape, Tensor, TrainConfig, Var};
use sleepradar_core::cohort::{generate_subject_with_motion, render_beat_signal, RadarConfig, RenderOptions, SubjectProfile};
use sleepradar_core::detector::{decode_interval, encode_offsets, iou_1d, nms_1d, DetectorConfig, DetectorModel};
use sleepradar_core::metrics::{
    ahi_and_severity, average_precision, bland_altman, icc, kappa_from_confusion, score_order, ApInput, Severity,
};
use sleepradar_core::oximetry::{
    clean_trace, count_desaturations, extract_features, odi3, soft_fuse, FusionNet, SpO2Features,
};
use sleepradar_core::pipeline::{
    fold_plans, prepare_subjects, radar_detections, run_pipeline, train_folds, PipelineConfig,
};
use sleepradar_core::preproc::{
    compute_spectrogram_stack, range_transform, PreprocConfig, SpectrogramStack, CHANNELS, CH_BREATHING, CH_DOPPLER,
};
use sleepradar_core::stager::crf::{log_partition, path_score, viterbi};
use sleepradar_core::stager::{
    change_loss, crf_loss, duration_loss, focal_loss, two_stage_train, DurationConfig, StagerConfig, StagerModel,
    StagerSample, StagerTrainConfig, STAGES,
};
use sleepradar_core::{AnnotatedEvent, DetectedSegment, EventKind, Hypnogram, Result, SleepStage, SpO2Trace};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn crf_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = 1 + case % 8;
        let y = rand_tensor(&mut rng, &[n, STAGES], 2.0);
        let a = rand_tensor(&mut rng, &[STAGES, STAGES], 2.0);
        let (y, a) = (y.data(), a.data());
        // Every path in lexicographic order, scored term by term.
        let total = STAGES.pow(n as u32);
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut scores = Vec::with_capacity(total);
        let mut path = vec![0usize; n];
        for code in 0..total {
            let mut c = code;
            for p in path.iter_mut().rev() {
                *p = c % STAGES;
                c /= STAGES;
            }
            let mut g = y[path[0]];
            for k in 1..n {
                g += y[k * STAGES + path[k]] + a[path[k - 1] * STAGES + path[k]];
            }
            if g > best.0 {
                best = (g, path.clone());
            }
            scores.push(g);
        }
        let m = best.0;
        let z = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        let got = log_partition(y, a, STAGES);
        worst = worst.max((got - z).abs());
        ensure((got - z).abs() < 1e-10, || format!("case {case}: log Z {got} vs {z}"))?;
        let vit = viterbi(y, a, STAGES);
        ensure(vit == best.1, || format!("case {case}: viterbi {vit:?} vs {:?}", best.1))?;
        ensure((path_score(y, a, STAGES, &vit) - m).abs() < 1e-10, || format!("case {case}: path score"))?;
    }
    Ok(format!("200 instances N<=8, max |dlogZ| {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn random_seg(rng: &mut ChaCha8Rng, span: f64) -> DetectedSegment {
    let a = rng.gen_range(0.0..span);
    DetectedSegment {
        kind: EventKind::ALL[rng.gen_range(0..4)],
        score: rng.gen(),
        t_start: a,
        t_end: a + rng.gen_range(1.0..30.0),
    }
}

/// Greedy NMS characterised without running it: the kept set `S` is the
/// unique subset where a candidate is kept exactly when no higher-ranked
/// kept candidate of its class overlaps it at `thr` or more.
fn brute_nms(segs: &[DetectedSegment], thr: f64, score_thr: f64) -> Vec<DetectedSegment> {
    let mut cand: Vec<DetectedSegment> = segs.iter().filter(|s| s.score >= score_thr).copied().collect();
    cand.sort_by(score_order);
    let n = cand.len();
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask >> i & 1 == 1;
        let consistent = (0..n).all(|i| {
            let suppressed = (0..i).any(|j| {
                kept(j) && cand[j].kind == cand[i].kind && iou_1d(cand[j].interval(), cand[i].interval()) >= thr
            });
            kept(i) == !suppressed
        });
        if consistent {
            found.push((0..n).filter(|&i| kept(i)).map(|i| cand[i]).collect::<Vec<_>>());
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

/// Greedy score-ordered matching followed by AP from every ranking cutoff.
fn brute_ap(inputs: &[(Vec<DetectedSegment>, Vec<AnnotatedEvent>)], thr: f64) -> Option<f64> {
    let n_truth: usize = inputs.iter().map(|x| x.1.len()).sum();
    if n_truth == 0 {
        return None;
    }
    let mut ranked: Vec<(DetectedSegment, bool)> = Vec::new();
    for (dets, truths) in inputs {
        let mut d = dets.clone();
        d.sort_by(score_order);
        let mut used = vec![false; truths.len()];
        for x in d {
            let mut best: Option<(usize, f64)> = None;
            for (i, t) in truths.iter().enumerate() {
                if used[i] || t.kind != x.kind {
                    continue;
                }
                let o = iou_1d(x.interval(), t.interval());
                if o >= thr && best.is_none_or(|b| o > b.1) {
                    best = Some((i, o));
                }
            }
            if let Some((i, _)) = best {
                used[i] = true;
            }
            ranked.push((x, best.is_some()));
        }
    }
    ranked.sort_by(|a, b| score_order(&a.0, &b.0));
    let k = ranked.len();
    let pr: Vec<(f64, f64)> = (1..=k)
        .map(|cut| {
            let tp = ranked[..cut].iter().filter(|r| r.1).count() as f64;
            (tp / cut as f64, tp / n_truth as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(_, r) in &pr {
        if r > prev {
            let p = pr.iter().filter(|q| q.1 >= r).map(|q| q.0).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    Some(ap)
}

fn detection_math() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_coding = 0.0f64;
    for _ in 0..500 {
        let (c, w) = (rng.gen_range(-50.0..650.0), rng.gen_range(1.0..200.0));
        let (a, gw) = (rng.gen_range(-50.0..650.0), rng.gen_range(0.5..200.0));
        let (tx, tw) = encode_offsets(c, w, (a, a + gw)).map_err(|e| e.to_string())?;
        let (s, e) = decode_interval(c, w, tx, tw);
        let err = ((s - a).abs()).max((e - a - gw).abs()) / (1.0 + a.abs() + gw);
        worst_coding = worst_coding.max(err);
        ensure(err < 1e-12, || format!("round trip ({a}, {}) -> ({s}, {e})", a + gw))?;
    }
    // Integer endpoints: intersection and union by counting unit cells.
    for _ in 0..500 {
        let a0 = rng.gen_range(0..100);
        let a1 = a0 + rng.gen_range(1..40);
        let b0 = rng.gen_range(0..100);
        let b1 = b0 + rng.gen_range(1..40);
        let cells = |lo: i32, hi: i32, x: i32| lo <= x && x < hi;
        let (mut inter, mut union) = (0, 0);
        for x in 0..200 {
            let (p, q) = (cells(a0, a1, x), cells(b0, b1, x));
            inter += (p && q) as i32;
            union += (p || q) as i32;
        }
        let got = iou_1d((a0 as f64, a1 as f64), (b0 as f64, b1 as f64));
        let want = inter as f64 / union as f64;
        ensure((got - want).abs() < 1e-15, || format!("IoU [{a0},{a1}) [{b0},{b1}): {got} vs {want}"))?;
    }
    for case in 0..300 {
        let n = rng.gen_range(0..=10);
        let segs: Vec<DetectedSegment> = (0..n).map(|_| random_seg(&mut rng, 60.0)).collect();
        let thr = rng.gen_range(0.1..0.9);
        let score_thr = rng.gen_range(0.0..0.3);
        let got = nms_1d(&segs, thr, score_thr);
        let want = brute_nms(&segs, thr, score_thr);
        ensure(got == want, || format!("NMS case {case}: {got:?} vs {want:?}"))?;
    }
    for case in 0..300 {
        let recs: Vec<(Vec<DetectedSegment>, Vec<AnnotatedEvent>)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                let d = (0..rng.gen_range(0..=10)).map(|_| random_seg(&mut rng, 80.0)).collect();
                let t = (0..rng.gen_range(0..=10))
                    .map(|_| {
                        let s = random_seg(&mut rng, 80.0);
                        AnnotatedEvent {
                            kind: s.kind,
                            t_start: s.t_start,
                            t_end: s.t_end,
                        }
                    })
                    .collect();
                (d, t)
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][case % 3];
        let inputs: Vec<ApInput> = recs
            .iter()
            .map(|(d, t)| ApInput {
                detections: d,
                truths: t,
            })
            .collect();
        let got = average_precision(&inputs, thr, None);
        let want = brute_ap(&recs, thr);
        let same = match (got, want) {
            (None, None) => true,
            (Some(g), Some(w)) => (g - w).abs() < 1e-12,
            _ => false,
        };
        ensure(same, || format!("AP case {case}: {got:?} vs {want:?}"))?;
    }
    Ok(format!("coding 500 (max rel {worst_coding:.1e}), IoU 500, NMS 300, AP 300"))
}

// ---------------------------------------------------------------- 3

fn grad_case(name: &str, params: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> std::result::Result<f64, String> {
    let r = grad_check(f, &params, 1e-5, 1e-4).map_err(|e| format!("{name}: {e}"))?;
    ensure(r.passed(), || format!("{name}: max rel error {:e}", r.overall_max()))?;
    Ok(r.overall_max())
}

fn tiny_detector() -> DetectorConfig {
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

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let y = rand_tensor(&mut rng, &[7, STAGES], 1.5);
    let a = rand_tensor(&mut rng, &[STAGES, STAGES], 1.0);
    let truth = [0, 0, 2, 3, 3, 4, 1];
    let w = [1.0, 2.0, 0.5, 1.5, 0.7];
    let mut worst = 0.0f64;
    worst = worst.max(grad_case("focal", vec![y.clone()], |t, v| focal_loss(t, v[0], &truth, &w))?);
    worst = worst.max(grad_case("change", vec![y.clone()], |t, v| change_loss(t, v[0]))?);
    worst = worst.max(grad_case("duration", vec![y.clone()], |t, v| duration_loss(t, v[0], &DurationConfig::default()))?);
    worst = worst.max(grad_case("crf", vec![y, a], |t, v| crf_loss(t, v[0], v[1], &truth))?);

    let feat = rand_tensor(&mut rng, &[3, 20], 1.0);
    let weights = rand_tensor(&mut rng, &[3, 12], 1.0);
    worst = worst.max(grad_case("roi_align_1d", vec![feat], |t, v| {
        let r = t.roi_align_1d(v[0], &[(2.3, 9.1), (-1.0, 4.0), (15.5, 25.0)], 4)?;
        let wv = t.constant(weights.clone());
        let p = t.mul(r, wv)?;
        Ok(t.sum(p))
    })?);

    let model = DetectorModel::new(tiny_detector(), &mut rng).map_err(|e| e.to_string())?;
    let events = vec![
        AnnotatedEvent {
            kind: EventKind::OA,
            t_start: 10.0,
            t_end: 22.0,
        },
        AnnotatedEvent {
            kind: EventKind::HP,
            t_start: 40.0,
            t_end: 48.0,
        },
    ];
    let mut chunk = SpectrogramStack::zeros(3, 64);
    for c in 0..CHANNELS {
        for r in 0..3 {
            for t in 0..64 {
                let dip = if (10..22).contains(&t) || (40..48).contains(&t) { -2.0 } else { 0.0 };
                let v = 0.3 * rng.gen_range(-1.0..1.0) + if c == CH_BREATHING { dip } else { 0.0 };
                chunk.set(c, r, t, v);
            }
        }
    }
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let (_, _, plan) = model
        .loss(&mut tape, &vars, &chunk, &events, None, &mut rng)
        .map_err(|e| e.to_string())?;
    worst = worst.max(grad_case("detection", model.params.tensors().to_vec(), |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        model.loss(t, v, &chunk, &events, Some(&plan), &mut r).map(|x| x.0)
    })?);

    let net = FusionNet::new(&mut rng);
    let x = Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let labels = [0, 1, 2, 3, 4, 0];
    let params: Vec<Tensor> = net
        .params
        .tensors()
        .iter()
        .map(|t| {
            let d = t.data().iter().map(|v| v + 0.1 * rng.gen_range(-1.0..1.0)).collect();
            Tensor::new(t.shape().to_vec(), d).unwrap()
        })
        .collect();
    worst = worst.max(grad_case("fusion net", params, |tape, vars| {
        let xv = tape.constant(x.clone());
        let y = net.logits(tape, vars, xv)?;
        tape.cross_entropy(y, &labels, None)
    })?);
    Ok(format!("7 losses/ops at h=1e-5, max rel error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn preprocessing_physics() -> Check {
    let noise_free = RenderOptions {
        snr_db: None,
        ..RenderOptions::default()
    };
    let cfg = RadarConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cube = render_beat_signal(&cfg, 0.8, &[0.0; 4], &[], &noise_free, &mut rng).map_err(|e| e.to_string())?;
    let rtm = range_transform(&cube, &cfg).map_err(|e| e.to_string())?;
    let peak = (0..rtm.range_bins)
        .max_by(|&i, &j| rtm.get(i, 0).norm().total_cmp(&rtm.get(j, 0).norm()))
        .unwrap();
    ensure(peak.abs_diff(16) <= 1, || format!("static target peaks at bin {peak}"))?;

    let profile = SubjectProfile {
        radar: cfg,
        breathing_rate: 0.3,
        ..SubjectProfile::quiet("physics", 4, 120.0)
    };
    let (rec, d) = generate_subject_with_motion(&profile).map_err(|e| e.to_string())?;
    let rtm = range_transform(&rec.beat, &cfg).map_err(|e| e.to_string())?;
    let p0 = rtm.get(16, 0).arg();
    let lambda = cfg.wavelength();
    let mut phase_err = 0.0f64;
    for t in 0..rtm.steps {
        let measured = rtm.get(16, t).arg() - p0;
        let expected = 4.0 * PI * (d[t] - d[0]) / lambda;
        phase_err = phase_err.max(((measured - expected + PI).rem_euclid(2.0 * PI) - PI).abs());
    }
    ensure(phase_err < 1e-6, || format!("slow-time phase error {phase_err:e} rad"))?;

    let pc = PreprocConfig::default();
    let stack = compute_spectrogram_stack(&rtm, &pc).map_err(|e| e.to_string())?;
    let bin = 16 - stack.range_window.0;
    let df = 1.0 / pc.frame_len;
    let mut xd_err = 0.0f64;
    for t in 15..stack.frames - 15 {
        xd_err = xd_err.max((stack.get(CH_DOPPLER, bin, t) - 0.3).abs());
    }
    ensure(xd_err <= df + 1e-9, || format!("x_D off by {xd_err} Hz (bin width {df})"))?;
    Ok(format!("peak bin {peak}, phase err {phase_err:.1e} rad, |x_D - 0.3| {xd_err:.3} Hz <= {df:.3}"))
}

// ---------------------------------------------------------------- 5

/// Piecewise-constant trace: `(start, value)` breakpoints from t = 0.
fn steps(len: usize, points: &[(usize, u8)]) -> Vec<u8> {
    let mut v = vec![0u8; len];
    for (k, &(start, value)) in points.iter().enumerate() {
        let end = points.get(k + 1).map_or(len, |p| p.0);
        v[start..end].iter_mut().for_each(|s| *s = value);
    }
    v
}

fn feats(v: &[u8], t_end: f64) -> Option<SpO2Features> {
    extract_features(&clean_trace(&SpO2Trace::from_raw(v.to_vec())), t_end).features
}

fn f4(p_od: f64, p_or: f64, v_od: f64, v_or: f64) -> Option<SpO2Features> {
    Some(SpO2Features { p_od, p_or, v_od, v_or })
}

fn with(mut v: Vec<u8>, at: usize, value: u8) -> Vec<u8> {
    v[at] = value;
    v
}

fn spo2_rules() -> Check {
    let dip4 = steps(200, &[(0, 97), (70, 93), (85, 96)]);
    let dip_count = |dips: &[u8]| {
        let mut v = vec![97u8; 3000];
        for (i, &d) in dips.iter().enumerate() {
            let at = 200 + i * 400;
            v[at..at + 20].iter_mut().for_each(|s| *s = 97 - d);
        }
        count_desaturations(&clean_trace(&SpO2Trace::from_raw(v)))
    };
    let odi_trace = {
        let mut v = vec![97u8; 3 * 3600];
        for i in 0..6 {
            let at = 600 + i * 1500;
            v[at..at + 25].iter_mut().for_each(|s| *s = 93);
        }
        clean_trace(&SpO2Trace::from_raw(v))
    };
    let truncated = extract_features(&SpO2Trace::from_raw(vec![97; 100]), 90.0);

    let cases: Vec<(&str, bool)> = vec![
        ("flat trace gives zero features", feats(&[97; 200], 50.0) == f4(0.0, 0.0, 0.0, 0.0)),
        ("4% step dip", feats(&dip4, 50.0) == f4(4.0, 3.0, -4.0, 3.0 / 15.0)),
        (
            "exactly 3% dip",
            feats(&steps(200, &[(0, 97), (70, 94), (85, 97)]), 50.0) == f4(3.0, 3.0, -3.0, 0.2),
        ),
        (
            "2% dip falls back to the maximum OD",
            feats(&steps(200, &[(0, 97), (70, 95), (85, 97)]), 50.0) == f4(2.0, 2.0, -2.0, 2.0 / 15.0),
        ),
        (
            "two shallow dips: deepest wins",
            feats(&steps(200, &[(0, 97), (60, 96), (72, 97), (80, 95), (92, 97)]), 50.0)
                == f4(2.0, 2.0, -2.0, 2.0 / 12.0),
        ),
        (
            "first >=3% dip wins over a deeper later one",
            feats(&steps(200, &[(0, 97), (60, 94), (72, 97), (80, 91), (92, 97)]), 50.0)
                == f4(3.0, 3.0, -3.0, 0.25),
        ),
        (
            "2% dip then 5% dip: the 5% dip is the first >=3%",
            feats(&steps(200, &[(0, 97), (60, 95), (72, 97), (80, 92), (92, 97)]), 50.0)
                == f4(5.0, 5.0, -5.0, 5.0 / 12.0),
        ),
        (
            "8 s 1% fluctuation is disregarded",
            feats(&steps(200, &[(0, 97), (60, 96), (68, 97)]), 50.0) == f4(0.0, 0.0, 0.0, 0.0),
        ),
        (
            "5 s 1% blip inside a desaturation is disregarded",
            feats(&steps(200, &[(0, 97), (70, 93), (75, 94), (80, 93), (85, 96)]), 50.0)
                == f4(4.0, 3.0, -4.0, 0.2),
        ),
        (
            "12 s 1% dip is kept",
            feats(&steps(200, &[(0, 97), (60, 96), (72, 97)]), 50.0) == f4(1.0, 1.0, -1.0, 1.0 / 12.0),
        ),
        ("0 inside the nadir is excluded", feats(&with(dip4.clone(), 75, 0), 50.0) == f4(4.0, 3.0, -4.0, 0.2)),
        ("255 before onset is excluded", feats(&with(dip4.clone(), 60, 255), 50.0) == f4(4.0, 3.0, -4.0, 0.2)),
        (
            "0 at the first nadir sample moves the nadir",
            feats(&with(dip4.clone(), 70, 0), 50.0) == f4(4.0, 3.0, -2.0, 3.0 / 14.0),
        ),
        (
            "window of artifacts has no features",
            feats(&steps(200, &[(0, 97), (51, 255), (111, 97)]), 50.0).is_none(),
        ),
        ("window past the end is truncated", truncated.truncated && truncated.features == f4(0.0, 0.0, 0.0, 0.0)),
        (
            "staircase counts as one desaturation",
            feats(&steps(200, &[(0, 97), (60, 96), (72, 95), (84, 94), (96, 97)]), 50.0)
                == f4(3.0, 3.0, -3.0 / 25.0, 0.25),
        ),
        ("three 4% and two 2% dips count 3", dip_count(&[4, 2, 4, 2, 4]) == 3),
        ("exactly 3% dips are counted", dip_count(&[3, 3, 2, 2]) == 2),
        ("ODI3 of 6 dips over 2 h of sleep", odi3(&odi_trace, 2.0).ok() == Some(3.0)),
        (
            "255 at a nadir does not hide the dip",
            count_desaturations(&clean_trace(&SpO2Trace::from_raw(with(dip4, 75, 255)))) == 1,
        ),
    ];
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(failed.is_empty(), || format!("failed cases: {failed:?}"))?;
    Ok(format!("{} constructed cases agree exactly", cases.len()))
}

// ---------------------------------------------------------------- 6

fn end_to_end(out: &Path) -> Check {
    let mut config = PipelineConfig::default();
    config.out_dir = out.to_path_buf();
    let report = run_pipeline(&config).map_err(|e| e.to_string())?;
    let icc = report.pooled.ahi.icc.ok_or("AHI ICC undefined")?;
    let ws = report.pooled.staging["WS"].accuracy.ok_or("WS accuracy undefined")?;
    let hours = report.subjects.iter().map(|s| s.duration).sum::<f64>() / 3600.0;
    let detail = format!(
        "{} subjects, {hours:.0} h, {} folds: AHI ICC {icc:.4}, WS accuracy {:.2}%",
        report.subjects.len(),
        report.folds.len(),
        100.0 * ws
    );
    ensure(icc >= 0.80 && ws >= 0.85, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 7

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Radar-only and fused AP@0.5 over the test subjects of one seeded cohort
/// with injected false positives, plus the ω = 0 AP.
fn fusion_direction_seed(seed: u64, out: &Path) -> std::result::Result<(f64, f64, f64, f64), String> {
    let mut c = PipelineConfig::default();
    c.seed = seed;
    c.out_dir = out.to_path_buf();
    c.cohort.subjects = 8;
    c.cohort.duration = 4.0 * 3600.0;
    c.cohort.uncoupled_ca = 0.1;
    c.cohort.uncoupled_other = 0.05;
    c.folds = 2;
    c.detector_train.optim = TrainConfig::new(1e-3, 30, 0);
    c.stager_train.stage1_epochs = 20;
    c.stager_train.stage2_epochs = 20;
    let e = |e: sleepradar_core::Error| e.to_string();

    let profiles = c.cohort_spec().profiles();
    let (coupled, total) = profiles.iter().fold((0, 0), |(k, n), p| {
        (k + p.od_coupling.iter().filter(|d| d.is_some()).count(), n + p.event_plan.len())
    });
    let coupled = coupled as f64 / total as f64;
    ensure(coupled >= 0.8, || format!("seed {seed}: only {:.0}% coupled", 100.0 * coupled))?;

    let subjects = prepare_subjects(&c).map_err(e)?;
    let plans = fold_plans(subjects.len(), c.folds).map_err(e)?;
    let models = train_folds(&c, &plans, &subjects).map_err(e)?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut at_zero = Vec::new();
    let mut truths = Vec::new();
    for m in &models {
        let thr = m.detector.config.score_threshold;
        let nms = m.detector.config.nms_iou;
        for &i in &m.plan.test {
            let s = &subjects[i];
            let mut dets = radar_detections(m, s).map_err(e)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + i as u64);
            let n_fp = ((0.1 * dets.len() as f64).round() as usize).max(1);
            let duration = s.stack.duration();
            let mut injected = 0;
            while injected < n_fp {
                let w = rng.gen_range(10.0..40.0);
                let t = rng.gen_range(0.0..duration - w);
                let fp = DetectedSegment {
                    kind: EventKind::ALL[rng.gen_range(0..4)],
                    score: rng.gen_range(0.4..0.7),
                    t_start: t,
                    t_end: t + w,
                };
                let clear = dets.iter().all(|d| !overlaps(d.interval(), fp.interval()))
                    && s.events.iter().all(|ev| !overlaps(ev.interval(), fp.interval()));
                if clear {
                    dets.push(fp);
                    injected += 1;
                }
            }
            let fused = soft_fuse(&dets, &s.spo2, &m.fusion, m.training.omega, thr, nms).map_err(e)?;
            let zero = soft_fuse(&dets, &s.spo2, &m.fusion, 0.0, thr, nms).map_err(e)?;
            after.push(fused.iter().map(|f| f.segment).collect::<Vec<_>>());
            at_zero.push(zero.iter().map(|f| f.segment).collect::<Vec<_>>());
            before.push(dets);
            truths.push(s.events.clone());
        }
    }
    let ap = |dets: &[Vec<DetectedSegment>]| {
        let inputs: Vec<ApInput> = dets
            .iter()
            .zip(&truths)
            .map(|(d, t)| ApInput {
                detections: d,
                truths: t,
            })
            .collect();
        average_precision(&inputs, 0.5, None).unwrap_or(0.0)
    };
    Ok((ap(&before), ap(&after), ap(&at_zero), coupled))
}

fn fusion_direction(root: &Path) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 1..=5u64 {
        let (before, after, zero, coupled) = fusion_direction_seed(seed, &root.join(format!("seed-{seed}")))?;
        let pass = after >= before && zero == before;
        ok &= pass;
        lines.push(format!(
            "seed {seed}: {before:.4} -> {after:.4}{} (coupled {:.0}%)",
            if zero == before { "" } else { ", omega=0 differs" },
            100.0 * coupled
        ));
    }
    let detail = format!("AP@0.5 radar -> fused, {}", lines.join("; "));
    ensure(ok, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn toy_night(epochs: usize, rng: &mut ChaCha8Rng) -> (SpectrogramStack, Vec<SleepStage>) {
    let mut stages = Vec::with_capacity(epochs);
    while stages.len() < epochs {
        let s = SleepStage::ALL[rng.gen_range(0..STAGES)];
        stages.extend(std::iter::repeat_n(s, rng.gen_range(3..10)));
    }
    stages.truncate(epochs);
    let mut stack = SpectrogramStack::zeros(3, epochs * 30);
    for (e, s) in stages.iter().enumerate() {
        let level = [1.5, 0.5, 0.0, -0.5, -1.5][s.index()];
        for t in e * 30..(e + 1) * 30 {
            for r in 0..3 {
                for c in 0..CHANNELS {
                    stack.set(c, r, t, level * (c as f64 - 1.0) + 0.5 * rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    (stack, stages)
}

fn two_stage(dir: &Path) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let nights: Vec<_> = (0..3).map(|_| toy_night(60, &mut rng)).collect();
    let samples: Vec<StagerSample> = nights
        .iter()
        .map(|(s, h)| StagerSample { stack: s, hypnogram: h })
        .collect();
    let mut model = StagerModel::new(StagerConfig::default(), &mut rng).map_err(|e| e.to_string())?;
    let cfg = StagerTrainConfig {
        stage1_epochs: 40,
        stage2_epochs: 20,
        crop_epochs: 40,
        seed: 8,
        ..StagerTrainConfig::default()
    };
    let e = |e: sleepradar_core::Error| e.to_string();
    save_checkpoint(&model.params, dir, "init").map_err(e)?;
    let report = two_stage_train(&mut model, &samples, &cfg).map_err(e)?;
    save_checkpoint(&report.stage1_params, dir, "stage1").map_err(e)?;
    save_checkpoint(&model.params, dir, "stage2").map_err(e)?;
    let init = load_checkpoint(dir, "init").map_err(e)?;
    let stage1 = load_checkpoint(dir, "stage1").map_err(e)?;
    let stage2 = load_checkpoint(dir, "stage2").map_err(e)?;
    let id = model.transitions_id();
    let changed = |a: &sleepradar_core::autodiff::ParamSet, b: &sleepradar_core::autodiff::ParamSet| {
        a.tensors().iter().zip(b.tensors()).filter(|(x, y)| x != y).count()
    };
    ensure(stage1.get(id) == init.get(id), || "stage 1 moved the transition matrix".into())?;
    let others = changed(&init, &stage1);
    ensure(others > 0, || "stage 1 left every parameter unchanged".into())?;
    ensure(stage2.get(id) != stage1.get(id), || "stage 2 left the transition matrix unchanged".into())?;
    let delta = stage2
        .get(id)
        .data()
        .iter()
        .zip(stage1.get(id).data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(format!(
        "transitions identical after stage 1 ({others} other tensors changed), max |dA| after stage 2 {delta:.3}"
    ))
}

// ---------------------------------------------------------------- 9

fn metrics_tables() -> Check {
    let kappa = kappa_from_confusion(&[vec![40, 10], vec![10, 40]]).ok_or("kappa undefined")?;
    ensure((kappa - 0.6).abs() < 1e-12, || format!("kappa {kappa}"))?;

    // Targets rated by two judges; ICC(2,1) = 46/71 from the two-way ANOVA
    // mean squares MSR = 113/15, MSC = 3, MSE = 7/5.
    let j1 = [9.0, 6.0, 8.0, 7.0, 10.0, 6.0];
    let j2 = [8.0, 2.0, 8.0, 6.0, 9.0, 7.0];
    let v = icc(&j1, &j2).map_err(|e| e.to_string())?;
    ensure((v - 46.0 / 71.0).abs() < 1e-10, || format!("ICC {v} vs {}", 46.0 / 71.0))?;

    let ba = bland_altman(&[2.0, 0.0], &[1.0, 1.0]).map_err(|e| e.to_string())?;
    let half = 1.96 * 2f64.sqrt();
    ensure(
        ba.mean_diff == 0.0 && (ba.loa_high - half).abs() < 1e-12 && (ba.loa_low + half).abs() < 1e-12,
        || format!("Bland-Altman {ba:?}"),
    )?;

    // 5 h of sleep after 1 h awake; 7 apneas and 3 hypopneas in sleep, one
    // apnea in wake and one below the score cut.
    let mut epochs = vec![SleepStage::W; 120];
    epochs.extend(std::iter::repeat_n(SleepStage::N2, 600));
    let hyp = Hypnogram::new(epochs, 30.0).map_err(|e| e.to_string())?;
    let seg = |kind, score, t: f64| DetectedSegment {
        kind,
        score,
        t_start: t,
        t_end: t + 20.0,
    };
    let mut dets: Vec<DetectedSegment> = (0..7)
        .map(|k| seg([EventKind::OA, EventKind::CA, EventKind::MA][k % 3], 0.9, 4000.0 + 1000.0 * k as f64))
        .collect();
    dets.extend((0..3).map(|k| seg(EventKind::HP, 0.8, 12_000.0 + 900.0 * k as f64)));
    dets.push(seg(EventKind::OA, 0.9, 600.0));
    dets.push(seg(EventKind::OA, 0.2, 15_000.0));
    let r = ahi_and_severity(&dets, &hyp, 0.5).map_err(|e| e.to_string())?;
    ensure(
        r.n_apnea == 7 && r.n_hypopnea == 3 && r.tst_hours == 5.0 && r.ahi == 2.0,
        || format!("AHI {r:?}"),
    )?;

    let bands = [
        (4.999, Severity::Healthy),
        (5.0, Severity::Mild),
        (14.999, Severity::Mild),
        (15.0, Severity::Moderate),
        (29.999, Severity::Moderate),
        (30.0, Severity::Severe),
    ];
    for (ahi, want) in bands {
        ensure(Severity::from_ahi(ahi) == want, || format!("AHI {ahi} -> {:?}", Severity::from_ahi(ahi)))?;
    }
    Ok(format!("kappa {kappa}, ICC {v:.12}, LoA +/-{half:.6}, AHI {} exact, band edges half-open", r.ahi))
}

// ---------------------------------------------------------------- 10

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Check {
    let run = |dir: PathBuf| -> std::result::Result<(String, Vec<(PathBuf, Vec<u8>)>), String> {
        let mut c = PipelineConfig::default();
        c.out_dir = dir.clone();
        c.cohort.subjects = 8;
        c.cohort.duration = 1800.0;
        c.detector_train.optim = TrainConfig::new(1e-3, 4, 0);
        c.detector_train.steps_per_epoch = 8;
        c.stager_train.stage1_epochs = 5;
        c.stager_train.stage2_epochs = 5;
        c.stager_train.crop_epochs = 30;
        c.fusion_train = TrainConfig::new(1e-2, 50, 0);
        let report = run_pipeline(&c).map_err(|e| e.to_string())?;
        Ok((report.to_json().map_err(|e| e.to_string())?, files_under(&dir.join("cache/models"))))
    };
    let (ra, ma) = run(root.join("a"))?;
    let (rb, mb) = run(root.join("b"))?;
    ensure(ra == rb, || "reports differ".into())?;
    ensure(!ma.is_empty() && ma == mb, || "checkpoints differ".into())?;
    let bytes: usize = ma.iter().map(|f| f.1.len()).sum();
    Ok(format!(
        "8 x 30 min cohort run twice: report {} bytes and {} checkpoint files ({bytes} bytes) identical",
        ra.len(),
        ma.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Option<Duration>, Box<dyn FnOnce() -> Check>)> = vec![
        ("CRF oracle equivalence", Some(Duration::from_secs(10)), Box::new(crf_oracle)),
        ("detection math oracles", Some(Duration::from_secs(30)), Box::new(detection_math)),
        ("gradient suite", Some(Duration::from_secs(120)), Box::new(gradient_suite)),
        ("preprocessing physics", Some(Duration::from_secs(30)), Box::new(preprocessing_physics)),
        ("SpO2 rule fidelity", None, Box::new(spo2_rules)),
        ("end-to-end synthetic agreement", Some(Duration::from_secs(30 * 60)), {
            let d = root.join("c6");
            Box::new(move || end_to_end(&d))
        }),
        ("fusion direction", None, {
            let d = root.join("c7");
            Box::new(move || fusion_direction(&d))
        }),
        ("two-stage training contract", None, {
            let d = root.join("c8");
            Box::new(move || {
                fs::create_dir_all(&d).map_err(|e| e.to_string())?;
                two_stage(&d)
            })
        }),
        ("metrics hand tables", None, Box::new(metrics_tables)),
        ("determinism", None, {
            let d = root.join("c10");
            Box::new(move || determinism(&d))
        }),
    ];
    // `cargo test --test acceptance -- 3 7` runs only criteria 3 and 7.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    let mut ran = 0;
    for (k, (name, budget, check)) in criteria.into_iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed();
        let over = budget.is_some_and(|b| secs > b);
        let budget_note = budget.map_or(String::new(), |b| format!(" / budget {} s", b.as_secs()));
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over time budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!(
            "criterion {:>2} {status} {name}: {detail} [{:.1} s{budget_note}]",
            k + 1,
            secs.as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
