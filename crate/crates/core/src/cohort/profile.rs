use serde::{Deserialize, Serialize};

use super::radar::{RadarConfig, RenderOptions};
use crate::error::{Error, Result};
use crate::types::{EventKind, SleepStage};

pub const EPOCH_LEN: f64 = 30.0;
pub const MIN_EVENT_DURATION: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedEvent {
    pub kind: EventKind,
    pub start: f64,
    pub duration: f64,
}

impl PlannedEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Desaturation following an event.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Desaturation {
    /// Depth in integer percent.
    pub depth: u8,
    /// Seconds from event end to desaturation onset.
    pub delay: f64,
}

/// A literal artifact reading inserted into the SpO₂ trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactSample {
    pub t: usize,
    /// 0 or 255.
    pub value: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysiologyOptions {
    /// Stage-dependent breathing rate/amplitude, slow drift and per-breath jitter.
    pub variability: bool,
    /// Body-movement bursts (frequent in wake, rare in sleep).
    pub movement: bool,
    /// Stronger breaths right after an event.
    pub recovery_breaths: bool,
}

impl Default for PhysiologyOptions {
    fn default() -> Self {
        Self {
            variability: true,
            movement: true,
            recovery_breaths: true,
        }
    }
}

impl PhysiologyOptions {
    pub fn none() -> Self {
        Self {
            variability: false,
            movement: false,
            recovery_breaths: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Spo2Options {
    /// Baseline saturation; drawn from 95..=98 when absent.
    pub baseline: Option<u8>,
    /// Desaturation fall speed (%/s).
    pub fall_rate: f64,
    /// Resaturation rise speed (%/s).
    pub rise_rate: f64,
    /// Short 1 % dips (< 10 s) per hour.
    pub jitter_per_hour: f64,
    /// Random artifact runs (0 or 255) per hour.
    pub artifacts_per_hour: f64,
}

impl Default for Spo2Options {
    fn default() -> Self {
        Self {
            baseline: None,
            fall_rate: 0.4,
            rise_rate: 0.25,
            jitter_per_hour: 0.0,
            artifacts_per_hour: 0.0,
        }
    }
}

/// Everything needed to render one synthetic recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    pub id: String,
    pub seed: u64,
    /// Recording length (s).
    pub duration: f64,
    pub radar: RadarConfig,
    pub render: RenderOptions,
    /// Nominal chest distance `R0` (m).
    pub bed_range: f64,
    /// Baseline breathing rate (Hz).
    pub breathing_rate: f64,
    /// Chest displacement amplitude (m).
    pub breathing_amplitude: f64,
    pub event_plan: Vec<PlannedEvent>,
    /// Planned hypnogram, one stage per 30 s epoch; empty means all N2.
    pub stage_plan: Vec<SleepStage>,
    /// Per-event desaturation, aligned with `event_plan`; `None` means the
    /// event produces no desaturation. Empty means no coupling at all.
    pub od_coupling: Vec<Option<Desaturation>>,
    pub artifact_plan: Vec<ArtifactSample>,
    pub physiology: PhysiologyOptions,
    pub spo2: Spo2Options,
}

impl SubjectProfile {
    /// Quiet single-subject profile: regular breathing, no events, no
    /// movement, noise-free rendering at the overnight radar settings.
    pub fn quiet(id: impl Into<String>, seed: u64, duration: f64) -> Self {
        Self {
            id: id.into(),
            seed,
            duration,
            radar: RadarConfig::overnight(),
            render: RenderOptions {
                amplitude: 1.0,
                snr_db: None,
            },
            bed_range: 0.8,
            breathing_rate: 0.25,
            breathing_amplitude: 4e-4,
            event_plan: Vec::new(),
            stage_plan: Vec::new(),
            od_coupling: Vec::new(),
            artifact_plan: Vec::new(),
            physiology: PhysiologyOptions::none(),
            spo2: Spo2Options {
                baseline: Some(97),
                ..Spo2Options::default()
            },
        }
    }

    pub fn num_epochs(&self) -> usize {
        (self.duration / EPOCH_LEN).ceil() as usize
    }

    pub fn num_frames(&self) -> usize {
        (self.radar.frame_rate * self.duration).floor() as usize
    }

    pub fn stages(&self) -> Vec<SleepStage> {
        if self.stage_plan.is_empty() {
            vec![SleepStage::N2; self.num_epochs()]
        } else {
            self.stage_plan.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidProfile(format!("{}: {m}", self.id)));
        self.radar
            .validate()
            .map_err(|e| Error::InvalidProfile(format!("{}: {e}", self.id)))?;
        if !(self.duration >= EPOCH_LEN) {
            return bad(format!(
                "duration {} s is shorter than one {EPOCH_LEN} s epoch",
                self.duration
            ));
        }
        if !(self.breathing_amplitude > 0.0 && self.breathing_amplitude <= 0.05) {
            return bad(format!(
                "breathing amplitude {} m outside (0, 0.05]",
                self.breathing_amplitude
            ));
        }
        if !(0.1..=5.0).contains(&self.breathing_rate) {
            return bad(format!(
                "breathing rate {} Hz outside the 0.1-5 Hz respiration band",
                self.breathing_rate
            ));
        }
        if !self.stage_plan.is_empty() && self.stage_plan.len() != self.num_epochs() {
            return bad(format!(
                "stage plan has {} epochs, recording needs {}",
                self.stage_plan.len(),
                self.num_epochs()
            ));
        }
        if !self.od_coupling.is_empty() && self.od_coupling.len() != self.event_plan.len() {
            return bad(format!(
                "{} desaturation entries for {} events",
                self.od_coupling.len(),
                self.event_plan.len()
            ));
        }
        for e in &self.event_plan {
            if !(e.duration >= MIN_EVENT_DURATION) {
                return bad(format!(
                    "{} event at {} s lasts {} s, minimum is {MIN_EVENT_DURATION} s",
                    e.kind, e.start, e.duration
                ));
            }
            if e.start < 0.0 || e.end() > self.duration {
                return bad(format!(
                    "{} event [{}, {}] s lies outside the recording",
                    e.kind,
                    e.start,
                    e.end()
                ));
            }
        }
        let mut order: Vec<&PlannedEvent> = self.event_plan.iter().collect();
        order.sort_by(|a, b| a.start.total_cmp(&b.start));
        for w in order.windows(2) {
            if w[1].start < w[0].end() {
                return bad(format!(
                    "events overlap: {} [{}, {}] s and {} [{}, {}] s",
                    w[0].kind,
                    w[0].start,
                    w[0].end(),
                    w[1].kind,
                    w[1].start,
                    w[1].end()
                ));
            }
        }
        for d in self.od_coupling.iter().flatten() {
            if d.depth == 0 || d.depth > 40 || !(d.delay >= 0.0) {
                return bad(format!("bad desaturation {d:?}"));
            }
        }
        for a in &self.artifact_plan {
            if a.value != 0 && a.value != 255 {
                return bad(format!("artifact value {} must be 0 or 255", a.value));
            }
        }
        if let Some(b) = self.spo2.baseline {
            if !(60..=100).contains(&b) {
                return bad(format!("SpO2 baseline {b} outside 60..=100"));
            }
        }
        Ok(())
    }
}
