use proptest::prelude::*;
use sleepradar_core::metrics::{
    accuracy, average_precision, bland_altman, cohens_kappa, diagnostic_stats, icc, pearson, AhiReport, ApInput,
    Severity,
};
use sleepradar_core::{AnnotatedEvent, DetectedSegment, EventKind};

fn kind() -> impl Strategy<Value = EventKind> {
    (0..4usize).prop_map(|k| EventKind::ALL[k])
}

fn truth() -> impl Strategy<Value = AnnotatedEvent> {
    (kind(), 0.0..500.0, 10.0..60.0).prop_map(|(kind, a, w)| AnnotatedEvent {
        kind,
        t_start: a,
        t_end: a + w,
    })
}

fn detection() -> impl Strategy<Value = DetectedSegment> {
    (kind(), 0.0..1.0, 0.0..500.0, 5.0..60.0).prop_map(|(kind, score, a, w)| DetectedSegment {
        kind,
        score,
        t_start: a,
        t_end: a + w,
    })
}

fn ap(dets: &[DetectedSegment], truths: &[AnnotatedEvent]) -> Option<f64> {
    average_precision(
        &[ApInput {
            detections: dets,
            truths,
        }],
        0.5,
        None,
    )
}

fn ratings() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3..30usize).prop_flat_map(|n| (prop::collection::vec(0.0..80.0, n), prop::collection::vec(0.0..80.0, n)))
}

proptest! {
    #[test]
    fn ap_is_a_fraction(
        truths in prop::collection::vec(truth(), 1..8),
        dets in prop::collection::vec(detection(), 0..12),
    ) {
        let v = ap(&dets, &truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn adding_a_false_positive_never_raises_ap(
        truths in prop::collection::vec(truth(), 1..8),
        dets in prop::collection::vec(detection(), 0..12),
        extra in detection(),
    ) {
        // Far past every truth, so it can only ever be a false positive.
        let fp = DetectedSegment { t_start: extra.t_start + 1000.0, t_end: extra.t_end + 1000.0, ..extra };
        let before = ap(&dets, &truths).unwrap();
        let mut more = dets.clone();
        more.push(fp);
        prop_assert!(ap(&more, &truths).unwrap() <= before);
    }

    #[test]
    fn reference_events_as_detections_score_one(truths in prop::collection::vec(truth(), 1..8)) {
        let dets: Vec<DetectedSegment> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| DetectedSegment { kind: t.kind, score: 1.0 / (i + 2) as f64, t_start: t.t_start, t_end: t.t_end })
            .collect();
        prop_assert_eq!(ap(&dets, &truths), Some(1.0));
    }

    #[test]
    fn icc_and_pearson_are_bounded((x, y) in ratings()) {
        if let Ok(v) = icc(&x, &y) {
            prop_assert!(v <= 1.0 + 1e-12);
        }
        if let Some(r) = pearson(&x, &y).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            prop_assert!((pearson(&y, &x).unwrap().unwrap() - r).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_ratings_agree_perfectly((x, _) in ratings()) {
        prop_assume!(x.iter().any(|v| *v != x[0]));
        prop_assert!((icc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let ba = bland_altman(&x, &x).unwrap();
        prop_assert_eq!((ba.mean_diff, ba.sd), (0.0, 0.0));
    }

    #[test]
    fn limits_of_agreement_straddle_the_mean_difference((x, y) in ratings()) {
        let ba = bland_altman(&x, &y).unwrap();
        let d: f64 = x.iter().zip(&y).map(|(a, b)| a - b).sum::<f64>() / x.len() as f64;
        prop_assert!((ba.mean_diff - d).abs() < 1e-9);
        prop_assert!(((ba.loa_high - ba.mean_diff) - (ba.mean_diff - ba.loa_low)).abs() < 1e-9);
        prop_assert!(ba.loa_low <= ba.loa_high);
    }

    #[test]
    fn kappa_and_accuracy_are_bounded(pairs in prop::collection::vec((0..5usize, 0..5usize), 1..60)) {
        let (p, t): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let acc = accuracy(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        if let Some(k) = cohens_kappa(&p, &t).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }
        prop_assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn severity_never_decreases_with_ahi(a in 0.0..80.0f64, b in 0.0..80.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(Severity::from_ahi(lo).index() <= Severity::from_ahi(hi).index());
    }

    #[test]
    fn ahi_is_events_per_hour(apnea in 0..400usize, hypopnea in 0..400usize, tst in 0.5..10.0f64) {
        let r = AhiReport::from_counts(apnea, hypopnea, tst).unwrap();
        prop_assert_eq!(r.ahi, (apnea + hypopnea) as f64 / tst);
        prop_assert_eq!(r.severity, Severity::from_ahi(r.ahi));
    }

    #[test]
    fn diagnostic_counts_cover_every_subject((est, truth) in ratings()) {
        let d = diagnostic_stats(&est, &truth, &[5.0, 15.0, 30.0]).unwrap();
        for s in &d.thresholds {
            prop_assert_eq!(s.tp + s.fp + s.tn + s.fn_, est.len());
            prop_assert_eq!(s.tp + s.fn_, truth.iter().filter(|&&g| g >= s.threshold).count());
        }
        let total: usize = d.severity_confusion.iter().flatten().sum();
        prop_assert_eq!(total, est.len());
    }
}

#[test]
fn zero_sleep_has_no_ahi() {
    assert!(AhiReport::from_counts(3, 1, 0.0).is_err());
}

#[test]
fn no_reference_events_has_no_ap() {
    let d = [DetectedSegment {
        kind: EventKind::CA,
        score: 0.9,
        t_start: 0.0,
        t_end: 20.0,
    }];
    assert_eq!(ap(&d, &[]), None);
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(icc(&[1.0, 2.0], &[1.0]).is_err());
    assert!(bland_altman(&[1.0], &[1.0]).is_err());
    assert!(diagnostic_stats(&[], &[], &[5.0]).is_err());
}
