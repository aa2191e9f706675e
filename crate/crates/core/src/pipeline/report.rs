//! Run report: per-subject results, per-fold and pooled metric blocks,
//! and their text renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FoldModels, FoldTraining, PipelineConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    ap_summary, bland_altman, diagnostic_stats, icc, kappa_from_confusion, linear_fit, pearson, AhiReport, ApInput,
    ApSummary, BlandAltman, DiagnosticReport, DIAGNOSTIC_THRESHOLDS,
};
use crate::oximetry::FusedDetection;
use crate::types::{AnnotatedEvent, DetectedSegment, Granularity, SleepStage};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const ICC_FORM: &str = "ICC(2,1): two-way random effects, absolute agreement, single measurement";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub id: String,
    pub fold: usize,
    /// Recording length (s).
    pub duration: f64,
    pub true_ahi: AhiReport,
    /// `None` when the predicted hypnogram contains no sleep.
    pub est_ahi: Option<AhiReport>,
    pub radar_only_ahi: Option<AhiReport>,
    pub odi3: Option<f64>,
    pub true_tst: f64,
    pub est_tst: f64,
    /// Five-stage confusion, rows = reference, columns = prediction.
    pub staging_confusion: Vec<Vec<usize>>,
    pub radar: Vec<DetectedSegment>,
    pub fused: Vec<FusedDetection>,
    pub truth: Vec<AnnotatedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagingStats {
    pub accuracy: Option<f64>,
    pub kappa: Option<f64>,
    pub confusion: Vec<Vec<usize>>,
}

/// Agreement between an estimate and its reference; cells that are
/// undefined for the data (too few subjects, zero variance) are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub n: usize,
    pub icc: Option<f64>,
    pub pearson: Option<f64>,
    pub bland_altman: Option<BlandAltman>,
    /// `(slope, intercept)` of estimate on reference.
    pub fit: Option<(f64, f64)>,
}

impl Agreement {
    pub fn of(est: &[f64], truth: &[f64]) -> Self {
        Self {
            n: est.len(),
            icc: icc(est, truth).ok(),
            pearson: pearson(est, truth).ok().flatten(),
            bland_altman: bland_altman(est, truth).ok(),
            fit: linear_fit(truth, est).ok().flatten(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub radar: ApSummary,
    pub fused: ApSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub subjects: Vec<String>,
    /// Keyed by granularity name (WS, WRLD, WRNN).
    pub staging: BTreeMap<String, StagingStats>,
    pub detection: DetectionStats,
    pub ahi: Agreement,
    pub ahi_radar_only: Agreement,
    /// ODI₃ against the reference AHI.
    pub odi3: Agreement,
    pub tst: Agreement,
    pub diagnostics: Option<DiagnosticReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldBlock {
    pub fold: usize,
    pub model_hash: String,
    pub training: FoldTraining,
    pub metrics: BlockReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub icc_form: String,
    pub config_hash: String,
    pub folds: Vec<FoldBlock>,
    pub pooled: BlockReport,
    pub subjects: Vec<SubjectResult>,
}

fn collapse(five: &[Vec<usize>], g: Granularity) -> Vec<Vec<usize>> {
    let k = g.num_classes();
    let mut out = vec![vec![0; k]; k];
    for (t, row) in five.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            let (Some(ts), Some(ps)) = (SleepStage::from_index(t), SleepStage::from_index(p)) else {
                continue;
            };
            out[g.map(ts)][g.map(ps)] += n;
        }
    }
    out
}

fn staging_stats(confusion: Vec<Vec<usize>>) -> StagingStats {
    let total: usize = confusion.iter().flatten().sum();
    let hits: usize = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    StagingStats {
        accuracy: (total > 0).then(|| hits as f64 / total as f64),
        kappa: kappa_from_confusion(&confusion),
        confusion,
    }
}

fn ap_inputs<'a>(
    dets: impl Iterator<Item = &'a [DetectedSegment]>,
    subjects: &[&'a SubjectResult],
) -> Vec<ApInput<'a>> {
    dets.zip(subjects)
        .map(|(d, s)| ApInput {
            detections: d,
            truths: &s.truth,
        })
        .collect()
}

impl BlockReport {
    pub fn from_subjects(subjects: &[&SubjectResult]) -> Self {
        let mut five = vec![vec![0usize; 5]; 5];
        for s in subjects {
            for (t, row) in s.staging_confusion.iter().enumerate() {
                for (p, &n) in row.iter().enumerate() {
                    five[t][p] += n;
                }
            }
        }
        let staging = Granularity::ALL
            .iter()
            .map(|&g| (g.as_str().to_string(), staging_stats(collapse(&five, g))))
            .collect();
        let fused: Vec<Vec<DetectedSegment>> =
            subjects.iter().map(|s| s.fused.iter().map(|f| f.segment).collect()).collect();
        let detection = DetectionStats {
            radar: ap_summary(&ap_inputs(subjects.iter().map(|s| s.radar.as_slice()), subjects), 0.5),
            fused: ap_summary(&ap_inputs(fused.iter().map(|f| f.as_slice()), subjects), 0.5),
        };
        let pairs = |f: &dyn Fn(&SubjectResult) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
            subjects
                .iter()
                .filter_map(|s| f(s).map(|e| (e, s.true_ahi.ahi)))
                .unzip()
        };
        let (est, truth) = pairs(&|s| s.est_ahi.map(|r| r.ahi));
        let (radar_est, radar_truth) = pairs(&|s| s.radar_only_ahi.map(|r| r.ahi));
        let (odi, odi_truth) = pairs(&|s| s.odi3);
        let est_tst: Vec<f64> = subjects.iter().map(|s| s.est_tst).collect();
        let true_tst: Vec<f64> = subjects.iter().map(|s| s.true_tst).collect();
        Self {
            subjects: subjects.iter().map(|s| s.id.clone()).collect(),
            staging,
            detection,
            ahi: Agreement::of(&est, &truth),
            ahi_radar_only: Agreement::of(&radar_est, &radar_truth),
            odi3: Agreement::of(&odi, &odi_truth),
            tst: Agreement::of(&est_tst, &true_tst),
            diagnostics: diagnostic_stats(&est, &truth, &DIAGNOSTIC_THRESHOLDS).ok(),
        }
    }
}

pub(crate) fn assemble(
    config: &PipelineConfig,
    folds: &[(FoldModels, usize)],
    subjects: Vec<SubjectResult>,
) -> Result<RunReport> {
    if subjects.is_empty() {
        return Err(Error::invalid("no test subjects were evaluated"));
    }
    let blocks = folds
        .iter()
        .map(|(m, _)| {
            let mine: Vec<&SubjectResult> = subjects.iter().filter(|s| s.fold == m.plan.fold).collect();
            FoldBlock {
                fold: m.plan.fold,
                model_hash: m.hash.clone(),
                training: m.training.clone(),
                metrics: BlockReport::from_subjects(&mine),
            }
        })
        .collect();
    let all: Vec<&SubjectResult> = subjects.iter().collect();
    Ok(RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        icc_form: ICC_FORM.to_string(),
        config_hash: config.hash()?,
        folds: blocks,
        pooled: BlockReport::from_subjects(&all),
        subjects,
    })
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value.get("schema_version").and_then(|v| v.as_u64());
        match found {
            Some(v) if v == REPORT_SCHEMA_VERSION as u64 => Ok(serde_json::from_value(value)?),
            Some(v) => Err(Error::VersionMismatch {
                expected: REPORT_SCHEMA_VERSION,
                found: u32::try_from(v).unwrap_or(u32::MAX),
            }),
            None => Err(Error::Format("report has no schema_version".into())),
        }
    }

    /// One record per detection:
    /// `subject,class,p_r,p_s,p_f,t_start,t_end`; `p_s` is empty when the
    /// SpO₂ window held no valid sample.
    pub fn detections_csv(&self) -> String {
        let mut out = String::from("subject,class,p_r,p_s,p_f,t_start,t_end\n");
        for s in &self.subjects {
            for f in &s.fused {
                let p_s = f.p_s.map(|v| v.to_string()).unwrap_or_default();
                let d = &f.segment;
                let _ = writeln!(
                    out,
                    "{},{},{},{p_s},{},{},{}",
                    s.id,
                    d.kind.as_str(),
                    f.p_r,
                    d.score,
                    d.t_start,
                    d.t_end
                );
            }
        }
        out
    }

    /// Human-readable summary of the pooled and per-fold blocks.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "report schema v{} | {}", self.schema_version, self.icc_form);
        let _ = writeln!(out, "subjects: {}  folds: {}", self.subjects.len(), self.folds.len());
        let _ = writeln!(out, "\n== pooled ==");
        write_block(&mut out, &self.pooled);
        for f in &self.folds {
            let _ = writeln!(
                out,
                "\n== fold {} (omega {}, AHI score threshold {}) ==",
                f.fold, f.training.omega, f.training.ahi_min_score
            );
            write_block(&mut out, &f.metrics);
        }
        let _ = writeln!(out, "\n== subjects ==");
        let _ = writeln!(out, "{:<8} {:>6} {:>9} {:>9} {:>9} {:>8} {:>8}", "id", "fold", "AHI ref", "AHI est", "ODI3", "TST ref", "TST est");
        for s in &self.subjects {
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>9.2} {:>9} {:>9} {:>8.2} {:>8.2}",
                s.id,
                s.fold,
                s.true_ahi.ahi,
                fmt_opt(s.est_ahi.map(|r| r.ahi)),
                fmt_opt(s.odi3),
                s.true_tst,
                s.est_tst
            );
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn write_block(out: &mut String, b: &BlockReport) {
    let _ = writeln!(out, "staging      accuracy   kappa");
    for (g, s) in &b.staging {
        let _ = writeln!(out, "  {:<10} {:>8}  {:>8}", g, fmt_opt(s.accuracy), fmt_opt(s.kappa));
    }
    let _ = writeln!(
        out,
        "AP@0.5       radar {}  fused {}",
        fmt_opt(b.detection.radar.overall),
        fmt_opt(b.detection.fused.overall)
    );
    for ((k, r), (_, f)) in b.detection.radar.per_class.iter().zip(&b.detection.fused.per_class) {
        let _ = writeln!(out, "  {:<10} radar {}  fused {}", k.as_str(), fmt_opt(*r), fmt_opt(*f));
    }
    for (name, a) in [("AHI", &b.ahi), ("AHI radar", &b.ahi_radar_only), ("ODI3", &b.odi3), ("TST", &b.tst)] {
        let ba = a.bland_altman.map_or_else(
            || "n/a".to_string(),
            |x| format!("{:.3} [{:.3}, {:.3}]", x.mean_diff, x.loa_low, x.loa_high),
        );
        let _ = writeln!(out, "{:<12} ICC {}  r {}  bias/LoA {}", name, fmt_opt(a.icc), fmt_opt(a.pearson), ba);
    }
    if let Some(d) = &b.diagnostics {
        for t in &d.thresholds {
            let _ = writeln!(
                out,
                "  AHI >= {:<4} Se {}  Sp {}  Acc {:.4}  kappa {}",
                t.threshold,
                fmt_opt(t.sensitivity),
                fmt_opt(t.specificity),
                t.accuracy,
                fmt_opt(t.kappa)
            );
        }
    }
}

/// Writes `report.json`, `summary.txt`, `detections.csv` and every plot
/// into `dir`.
pub fn emit_report_and_plots(report: &RunReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if report.subjects.is_empty() {
        return Err(Error::invalid("report has no subjects to plot"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    put("report.json".into(), report.to_json()?)?;
    put("summary.txt".into(), report.summary())?;
    put("detections.csv".into(), report.detections_csv())?;
    for (name, svg) in super::plots::all_plots(report) {
        put(name, svg)?;
    }
    Ok(written)
}
