//! Evaluation metrics for detection, AHI estimation and staging.

pub mod agreement;
pub mod ahi;
pub mod ap;

pub use agreement::{
    accuracy, bland_altman, cohens_kappa, confusion, icc, kappa_from_confusion, linear_fit, pearson, BlandAltman,
};
pub use ahi::{
    ahi_and_severity, diagnostic_stats, AhiReport, DiagnosticReport, Severity, ThresholdStats, DIAGNOSTIC_THRESHOLDS,
};
pub use ap::{ap_summary, average_precision, greedy_match, score_order, ApInput, ApSummary};
