//! Apnea-hypopnea index, severity bands and threshold diagnostics.

use serde::{Deserialize, Serialize};

use super::agreement::kappa_from_confusion;
use crate::error::{Error, Result};
use crate::types::{DetectedSegment, Hypnogram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Healthy,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::Healthy, Severity::Mild, Severity::Moderate, Severity::Severe];

    /// Bands `[0,5)`, `[5,15)`, `[15,30)`, `[30,∞)`.
    pub fn from_ahi(ahi: f64) -> Self {
        if ahi < 5.0 {
            Severity::Healthy
        } else if ahi < 15.0 {
            Severity::Mild
        } else if ahi < 30.0 {
            Severity::Moderate
        } else {
            Severity::Severe
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Healthy => "healthy",
            Severity::Mild => "mild",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AhiReport {
    pub n_apnea: usize,
    pub n_hypopnea: usize,
    pub tst_hours: f64,
    pub ahi: f64,
    pub severity: Severity,
}

impl AhiReport {
    pub fn from_counts(n_apnea: usize, n_hypopnea: usize, tst_hours: f64) -> Result<Self> {
        if !(tst_hours > 0.0) {
            return Err(Error::NoSleep);
        }
        let ahi = (n_apnea + n_hypopnea) as f64 / tst_hours;
        Ok(Self {
            n_apnea,
            n_hypopnea,
            tst_hours,
            ahi,
            severity: Severity::from_ahi(ahi),
        })
    }
}

/// Counts segments scoring at least `min_score` whose midpoint falls in a
/// sleep epoch of `hypnogram`.
pub fn ahi_and_severity(detections: &[DetectedSegment], hypnogram: &Hypnogram, min_score: f64) -> Result<AhiReport> {
    let (mut apnea, mut hypopnea) = (0, 0);
    for d in detections.iter().filter(|d| d.score >= min_score) {
        if hypnogram.stage_at(d.midpoint()).is_some_and(|s| s.is_sleep()) {
            if d.kind.is_apnea() {
                apnea += 1;
            } else {
                hypopnea += 1;
            }
        }
    }
    AhiReport::from_counts(apnea, hypopnea, hypnogram.tst_hours())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// `None` when no subject is positive.
    pub sensitivity: Option<f64>,
    /// `None` when no subject is negative.
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub thresholds: Vec<ThresholdStats>,
    /// Rows = true severity, columns = estimated severity.
    pub severity_confusion: [[usize; 4]; 4],
}

pub const DIAGNOSTIC_THRESHOLDS: [f64; 3] = [5.0, 15.0, 30.0];

/// Positive means `AHI ≥ threshold`.
pub fn diagnostic_stats(est: &[f64], truth: &[f64], thresholds: &[f64]) -> Result<DiagnosticReport> {
    if est.len() != truth.len() {
        return Err(Error::shape("diagnostic_stats", format!("{} vs {} subjects", est.len(), truth.len())));
    }
    if est.is_empty() {
        return Err(Error::invalid("diagnostic_stats needs at least one subject"));
    }
    let thresholds = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for (&e, &g) in est.iter().zip(truth) {
                match (e >= t, g >= t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, false) => tn += 1,
                    (false, true) => fn_ += 1,
                }
            }
            let ratio = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
            ThresholdStats {
                threshold: t,
                tp,
                fp,
                tn,
                fn_,
                sensitivity: ratio(tp, fn_),
                specificity: ratio(tn, fp),
                accuracy: (tp + tn) as f64 / est.len() as f64,
                kappa: kappa_from_confusion(&[vec![tn, fp], vec![fn_, tp]]),
            }
        })
        .collect();
    let mut severity_confusion = [[0; 4]; 4];
    for (&e, &g) in est.iter().zip(truth) {
        severity_confusion[Severity::from_ahi(g).index()][Severity::from_ahi(e).index()] += 1;
    }
    Ok(DiagnosticReport {
        thresholds,
        severity_confusion,
    })
}
