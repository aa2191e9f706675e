use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sleepradar_core::autodiff::TrainConfig;
use sleepradar_core::pipeline::plots::{bland_altman_svg, scatter_svg};
use sleepradar_core::pipeline::report::emit_report_and_plots;
use sleepradar_core::pipeline::{
    fold_hash, fold_plans, prepare_subjects, run_pipeline, sweep_omega, PipelineConfig, RunReport,
};
use sleepradar_core::Error;

fn quick_config(out: &Path, subjects: usize) -> PipelineConfig {
    let mut c = PipelineConfig::default();
    c.cohort.subjects = subjects;
    c.cohort.duration = 1800.0;
    c.detector_train.optim = TrainConfig::new(1e-3, 2, 0);
    c.detector_train.steps_per_epoch = 3;
    c.detector_train.eval_every = 1;
    c.stager_train.stage1_epochs = 2;
    c.stager_train.stage2_epochs = 2;
    c.stager_train.crop_epochs = 30;
    c.fusion_train = TrainConfig::new(1e-2, 20, 0);
    c.out_dir = out.to_path_buf();
    c
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn folds_partition_subjects() {
    for (n, k) in [(8, 4), (12, 4), (5, 2), (7, 3)] {
        let plans = fold_plans(n, k).unwrap();
        assert_eq!(plans.len(), k);
        let mut seen = vec![0; n];
        for p in &plans {
            for &i in &p.test {
                seen[i] += 1;
                assert!(!p.train.contains(&i) && !p.val.contains(&i));
            }
            assert!(!p.train.is_empty() && !p.val.is_empty());
            assert!(p.val.iter().all(|i| !p.train.contains(i)));
            assert_eq!(p.train.len() + p.val.len() + p.test.len(), n);
        }
        assert!(seen.iter().all(|&c| c == 1), "{n} subjects / {k} folds: {seen:?}");
    }
}

#[test]
fn bad_fold_counts_are_rejected() {
    assert!(fold_plans(8, 1).is_err());
    assert!(fold_plans(3, 4).is_err());
    let mut c = PipelineConfig::default();
    c.folds = 1;
    assert!(matches!(c.validate(), Err(Error::InvalidArgument(_))));
    c.folds = 4;
    c.omega = Some(1.5);
    assert!(c.validate().is_err());
}

#[test]
fn upstream_changes_reach_every_downstream_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick_config(tmp.path(), 4);
    c.cohort.duration = 600.0;
    c.folds = 2;
    let plan = &fold_plans(4, 2).unwrap()[0];
    let base = prepare_subjects(&c).unwrap();
    let base_fold = fold_hash(&c, plan, &base).unwrap();

    let mut changed = c.clone();
    changed.preproc.frame_len += 1.0;
    let subjects = prepare_subjects(&changed).unwrap();
    for (a, b) in base.iter().zip(&subjects) {
        assert_ne!(a.hash, b.hash, "{}", a.id);
    }
    assert_ne!(fold_hash(&changed, plan, &subjects).unwrap(), base_fold);
    assert_ne!(changed.hash().unwrap(), c.hash().unwrap());

    let mut reseeded = c.clone();
    reseeded.seed += 1;
    let subjects = prepare_subjects(&reseeded).unwrap();
    assert_ne!(fold_hash(&reseeded, plan, &subjects).unwrap(), base_fold);

    let mut retrained = c.clone();
    retrained.stager_train.stage2_epochs += 1;
    assert_ne!(fold_hash(&retrained, plan, &base).unwrap(), base_fold);
    retrained = c.clone();
    retrained.omega = Some(0.3);
    assert_ne!(fold_hash(&retrained, plan, &base).unwrap(), base_fold);

    // The output location does not affect any hash.
    let mut moved = c.clone();
    moved.out_dir = tmp.path().join("elsewhere");
    assert_eq!(moved.hash().unwrap(), c.hash().unwrap());
    assert_eq!(fold_hash(&moved, plan, &base).unwrap(), base_fold);
}

#[test]
fn small_cohort_run_is_complete_deterministic_and_cached() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = quick_config(a.path(), 8);
    let cb = quick_config(b.path(), 8);

    let ra = run_pipeline(&ca).unwrap();
    assert_eq!(ra.folds.len(), 4);
    assert_eq!(ra.subjects.len(), 8);
    assert_eq!(ra.pooled.subjects.len(), 8);
    for f in &ra.folds {
        assert_eq!(f.metrics.subjects.len(), 2);
        assert_eq!(f.metrics.staging.len(), 3);
        assert!((0.0..=1.0).contains(&f.training.omega));
    }
    for g in ["WS", "WRLD", "WRNN"] {
        assert!(ra.pooled.staging[g].accuracy.is_some());
    }
    assert!(ra.pooled.diagnostics.is_some());
    assert_eq!(ra.pooled.ahi.n + ra.subjects.iter().filter(|s| s.est_ahi.is_none()).count(), 8);

    let rb = run_pipeline(&cb).unwrap();
    assert_eq!(ra.to_json().unwrap(), rb.to_json().unwrap());
    let models_a = files_under(&a.path().join("cache/models"));
    let models_b = files_under(&b.path().join("cache/models"));
    assert!(!models_a.is_empty());
    assert_eq!(models_a, models_b);

    // A second run in the same directory loads everything from the cache.
    let start = std::time::Instant::now();
    let again = run_pipeline(&ca).unwrap();
    assert_eq!(again.to_json().unwrap(), ra.to_json().unwrap());
    assert_eq!(files_under(&a.path().join("cache/models")), models_a);
    eprintln!("cached re-run took {:?}", start.elapsed());

    let json = ra.to_json().unwrap();
    assert_eq!(RunReport::from_json(&json).unwrap(), ra);
    let bumped = json.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    assert!(matches!(
        RunReport::from_json(&bumped),
        Err(Error::VersionMismatch { expected: 1, found: 99 })
    ));

    let csv = ra.detections_csv();
    let rows: usize = ra.subjects.iter().map(|s| s.fused.len()).sum();
    assert_eq!(csv.lines().count(), rows + 1);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 7));

    let dir = a.path().join("report");
    let files = emit_report_and_plots(&ra, &dir).unwrap();
    for name in ["report.json", "summary.txt", "detections.csv", "ahi_scatter.svg", "ahi_bland_altman.svg", "tst_scatter.svg", "severity_confusion.svg"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    let mut svgs = 0;
    for f in &files {
        if f.extension().is_some_and(|e| e == "svg") {
            let text = fs::read_to_string(f).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
            svgs += 1;
        }
    }
    assert_eq!(svgs, 4 + ra.subjects.len());

    // ω = 0 reproduces the radar-only AP exactly.
    let (radar_ap, rows) = sweep_omega(&ca, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].ap, radar_ap);
}

#[test]
fn stage_failures_name_the_stage_and_subject_and_keep_finished_work() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick_config(tmp.path(), 4);
    c.cohort.duration = 600.0;
    c.folds = 2;
    c.stager_train.crop_epochs = 0;
    match run_pipeline(&c) {
        Err(Error::Stage { stage, subject, .. }) => {
            assert_eq!(stage, "train-stager");
            assert!(subject.starts_with("fold-"), "{subject}");
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    let done = fs::read_dir(tmp.path().join("cache/subjects"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("DONE").is_file())
        .count();
    assert_eq!(done, 4);

    let mut c = quick_config(tmp.path(), 4);
    c.preproc.frame_len = 0.0;
    match run_pipeline(&c) {
        Err(e @ Error::Stage { .. }) => {
            let msg = e.to_string();
            assert!(msg.starts_with("preprocess failed for subject "), "{msg}");
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
}

#[test]
fn empty_reports_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick_config(tmp.path(), 4);
    c.folds = 2;
    let mut r = run_pipeline(&c).unwrap();
    r.subjects.clear();
    assert!(emit_report_and_plots(&r, &tmp.path().join("empty")).is_err());
}

#[test]
fn unwritable_output_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = quick_config(tmp.path(), 4);
    c.folds = 2;
    let r = run_pipeline(&c).unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    assert!(emit_report_and_plots(&r, &blocker.join("out")).is_err());
}

fn attr(n: &roxmltree::Node, a: &str) -> f64 {
    n.attribute(a).unwrap().parse().unwrap()
}

#[test]
fn perfect_agreement_sits_on_the_identity_and_zero_band() {
    let v = [2.0, 7.5, 16.0, 33.0, 41.0];
    let text = scatter_svg("AHI", "ref", "est", &v, &v);
    let doc = roxmltree::Document::parse(&text).unwrap();
    let lines: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("line")).collect();
    let identity = lines
        .iter()
        .find(|n| n.attribute("style").unwrap().contains("dasharray"))
        .unwrap();
    let (x1, y1, x2, y2) = (attr(identity, "x1"), attr(identity, "y1"), attr(identity, "x2"), attr(identity, "y2"));
    let circles: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("circle")).collect();
    assert_eq!(circles.len(), v.len());
    for c in &circles {
        let (cx, cy) = (attr(c, "cx"), attr(c, "cy"));
        let expect = y1 + (cx - x1) / (x2 - x1) * (y2 - y1);
        assert!((cy - expect).abs() < 0.02, "({cx}, {cy}) off the identity line");
    }

    let text = bland_altman_svg("AHI", &v, &v);
    let doc = roxmltree::Document::parse(&text).unwrap();
    let horizontal: Vec<f64> = doc
        .descendants()
        .filter(|n| n.has_tag_name("line") && n.attribute("style").unwrap() != "stroke:black")
        .map(|n| attr(&n, "y1"))
        .collect();
    assert_eq!(horizontal.len(), 3);
    let cy: Vec<f64> = doc
        .descendants()
        .filter(|n| n.has_tag_name("circle"))
        .map(|n| attr(&n, "cy"))
        .collect();
    for y in horizontal.iter().chain(&cy) {
        assert!((y - horizontal[0]).abs() < 1e-9);
    }
}
