//! Domain types shared between the simulator, the networks and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sleep apnea-hypopnea event type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    CA,
    OA,
    MA,
    HP,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [EventKind::CA, EventKind::OA, EventKind::MA, EventKind::HP];

    /// Index in the five-way detector output (0 is the non-event class).
    pub fn class_index(self) -> usize {
        match self {
            EventKind::CA => 1,
            EventKind::OA => 2,
            EventKind::MA => 3,
            EventKind::HP => 4,
        }
    }

    pub fn from_class_index(c: usize) -> Option<Self> {
        match c {
            1 => Some(EventKind::CA),
            2 => Some(EventKind::OA),
            3 => Some(EventKind::MA),
            4 => Some(EventKind::HP),
            _ => None,
        }
    }

    pub fn is_apnea(self) -> bool {
        !matches!(self, EventKind::HP)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::CA => "CA",
            EventKind::OA => "OA",
            EventKind::MA => "MA",
            EventKind::HP => "HP",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CA" => Ok(EventKind::CA),
            "OA" => Ok(EventKind::OA),
            "MA" => Ok(EventKind::MA),
            "HP" => Ok(EventKind::HP),
            _ => Err(Error::Format(format!("unknown event kind {s:?}"))),
        }
    }
}

/// Ground-truth event interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEvent {
    pub kind: EventKind,
    pub t_start: f64,
    pub t_end: f64,
}

impl AnnotatedEvent {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

/// Scored event segment produced by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedSegment {
    pub kind: EventKind,
    pub score: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl DetectedSegment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    R,
    N1,
    N2,
    N3,
}

impl SleepStage {
    pub const ALL: [SleepStage; 5] = [
        SleepStage::W,
        SleepStage::R,
        SleepStage::N1,
        SleepStage::N2,
        SleepStage::N3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_sleep(self) -> bool {
        self != SleepStage::W
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::R => "R",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
        }
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SleepStage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown sleep stage {s:?}")))
    }
}

/// Per-epoch sleep stage sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub epochs: Vec<SleepStage>,
    pub epoch_len: f64,
}

impl Hypnogram {
    pub fn new(epochs: Vec<SleepStage>, epoch_len: f64) -> Result<Self> {
        if epochs.is_empty() {
            return Err(Error::invalid("hypnogram must have at least one epoch"));
        }
        if !(epoch_len > 0.0) {
            return Err(Error::invalid("epoch length must be positive"));
        }
        Ok(Self { epochs, epoch_len })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Stage of the epoch containing time `t`, if `t` lies inside the record.
    pub fn stage_at(&self, t: f64) -> Option<SleepStage> {
        if t < 0.0 {
            return None;
        }
        self.epochs.get((t / self.epoch_len).floor() as usize).copied()
    }

    /// Total sleep time in hours.
    pub fn tst_hours(&self) -> f64 {
        self.epochs.iter().filter(|s| s.is_sleep()).count() as f64 * self.epoch_len / 3600.0
    }

    pub fn stage_indices(&self) -> Vec<usize> {
        self.epochs.iter().map(|s| s.index()).collect()
    }
}

/// Label resolution used when comparing hypnograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    /// Wake / Sleep.
    WS,
    /// Wake / REM / Light (N1, N2) / Deep (N3).
    WRLD,
    /// All five stages.
    WRNN,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::WS, Granularity::WRLD, Granularity::WRNN];

    pub fn num_classes(self) -> usize {
        match self {
            Granularity::WS => 2,
            Granularity::WRLD => 4,
            Granularity::WRNN => 5,
        }
    }

    /// Coarse label index of a stage.
    pub fn map(self, s: SleepStage) -> usize {
        match self {
            Granularity::WS => usize::from(s.is_sleep()),
            Granularity::WRLD => match s {
                SleepStage::W => 0,
                SleepStage::R => 1,
                SleepStage::N1 | SleepStage::N2 => 2,
                SleepStage::N3 => 3,
            },
            Granularity::WRNN => s.index(),
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Granularity::WS => &["W", "S"],
            Granularity::WRLD => &["W", "R", "Light", "Deep"],
            Granularity::WRNN => &["W", "R", "N1", "N2", "N3"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::WS => "WS",
            Granularity::WRLD => "WRLD",
            Granularity::WRNN => "WRNN",
        }
    }
}

/// Pulse-oximeter samples at 1 Hz with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpO2Trace {
    pub samples: Vec<u8>,
    pub valid: Vec<bool>,
}

impl SpO2Trace {
    /// Wraps raw readings; 0 and 255 mark artifacts.
    pub fn from_raw(samples: Vec<u8>) -> Self {
        let valid = samples.iter().map(|&v| v != 0 && v != 255).collect();
        Self { samples, valid }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn granularity_maps() {
        let ws: Vec<usize> = SleepStage::ALL.iter().map(|&s| Granularity::WS.map(s)).collect();
        assert_eq!(ws, vec![0, 1, 1, 1, 1]);
        let wrld: Vec<usize> = SleepStage::ALL.iter().map(|&s| Granularity::WRLD.map(s)).collect();
        assert_eq!(wrld, vec![0, 1, 2, 2, 3]);
        for g in Granularity::ALL {
            let mut seen = vec![false; g.num_classes()];
            for s in SleepStage::ALL {
                seen[g.map(s)] = true;
            }
            assert!(seen.iter().all(|&b| b), "{g:?} must be surjective");
        }
    }

    #[test]
    fn tst_counts_non_wake() {
        let mut e = vec![SleepStage::N2; 840];
        e.extend(vec![SleepStage::W; 60]);
        let h = Hypnogram::new(e, 30.0).unwrap();
        assert!((h.tst_hours() - 7.0).abs() < 1e-12);
        let all_wake = Hypnogram::new(vec![SleepStage::W; 10], 30.0).unwrap();
        assert_eq!(all_wake.tst_hours(), 0.0);
    }

    #[test]
    fn artifact_mask() {
        let t = SpO2Trace::from_raw(vec![97, 0, 96, 255]);
        assert_eq!(t.valid, vec![true, false, true, false]);
    }
}
