//! Reproducible synthetic overnight recordings: radar beat signal, SpO₂,
//! ground-truth events and hypnogram.

pub mod container;
pub mod physiology;
pub mod profile;
pub mod radar;
pub mod spo2;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use container::{load_cohort, load_record, save_cohort, save_record};
pub use profile::{
    ArtifactSample, Desaturation, PhysiologyOptions, PlannedEvent, Spo2Options, SubjectProfile, EPOCH_LEN,
};
pub use radar::{render_beat_signal, BeatSignalCube, RadarConfig, RenderOptions};

use crate::error::Result;
use crate::types::{AnnotatedEvent, EventKind, Hypnogram, SpO2Trace};

/// Independent random stream `stream` derived from `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_EVENTS: u64 = 1;
const STREAM_MOVEMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SPO2: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub config: RadarConfig,
    pub beat: BeatSignalCube,
    pub spo2: SpO2Trace,
    pub truth_events: Vec<AnnotatedEvent>,
    pub truth_hypnogram: Hypnogram,
}

/// Renders a profile into a full recording. Deterministic in the profile.
pub fn generate_subject(profile: &SubjectProfile) -> Result<SubjectRecord> {
    let (record, _) = generate_subject_with_motion(profile)?;
    Ok(record)
}

/// Like [`generate_subject`] but also returns the chest displacement `d[t]`
/// used for rendering.
pub fn generate_subject_with_motion(profile: &SubjectProfile) -> Result<(SubjectRecord, Vec<f64>)> {
    profile.validate()?;
    let mut events = profile.event_plan.clone();
    let mut coupling = profile.od_coupling.clone();
    if !coupling.is_empty() {
        let mut paired: Vec<_> = events.into_iter().zip(coupling).collect();
        paired.sort_by(|a, b| a.0.start.total_cmp(&b.0.start));
        (events, coupling) = paired.into_iter().unzip();
    } else {
        events.sort_by(|a, b| a.start.total_cmp(&b.start));
    }
    let sorted = SubjectProfile {
        event_plan: events.clone(),
        od_coupling: coupling,
        ..profile.clone()
    };
    let mut motion_rng = substream(profile.seed, STREAM_MOVEMENT);
    let (d, m) = physiology::synthesize_motion(&sorted, &mut motion_rng);
    let mut noise_rng = substream(profile.seed, STREAM_NOISE);
    let beat = render_beat_signal(&profile.radar, profile.bed_range, &d, &m, &profile.render, &mut noise_rng)?;
    let mut spo2_rng = substream(profile.seed, STREAM_SPO2);
    let spo2 = spo2::synthesize_spo2(&sorted, &events, &mut spo2_rng);
    let truth_events = events
        .iter()
        .map(|e| AnnotatedEvent {
            kind: e.kind,
            t_start: e.start,
            t_end: e.end(),
        })
        .collect();
    let truth_hypnogram = Hypnogram::new(profile.stages(), EPOCH_LEN)?;
    Ok((
        SubjectRecord {
            id: profile.id.clone(),
            config: profile.radar,
            beat,
            spo2,
            truth_events,
            truth_hypnogram,
        },
        d,
    ))
}

/// Fold of each subject for `k`-fold cross-validation (`i mod k`).
pub fn fold_assignment(subjects: usize, k: usize) -> Vec<usize> {
    (0..subjects).map(|i| i % k.max(1)).collect()
}

/// Recipe for a whole synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub subjects: usize,
    /// Recording length per subject (s).
    pub duration: f64,
    pub seed: u64,
    pub radar: RadarConfig,
    pub render: RenderOptions,
    /// Target AHI ranges cycled over subjects (order shuffled by seed).
    pub ahi_bands: Vec<(f64, f64)>,
    /// `(CA, OA, MA, HP)` event-type probabilities.
    pub kind_mix: [f64; 4],
    /// Probability that a CA event produces no desaturation.
    pub uncoupled_ca: f64,
    /// Probability that any other event produces no desaturation.
    pub uncoupled_other: f64,
    /// Minimum gap between events (s).
    pub min_event_gap: f64,
    pub physiology: PhysiologyOptions,
    pub spo2: Spo2Options,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            subjects: 12,
            duration: 8.0 * 3600.0,
            seed: 7,
            radar: RadarConfig::overnight(),
            render: RenderOptions::default(),
            ahi_bands: vec![(0.5, 4.0), (6.0, 14.0), (17.0, 28.0), (32.0, 45.0)],
            kind_mix: physiology::DEFAULT_KIND_MIX,
            uncoupled_ca: 0.7,
            uncoupled_other: 0.05,
            min_event_gap: 30.0,
            physiology: PhysiologyOptions::default(),
            spo2: Spo2Options {
                baseline: None,
                jitter_per_hour: 4.0,
                artifacts_per_hour: 1.0,
                ..Spo2Options::default()
            },
        }
    }
}

impl CohortSpec {
    pub fn profiles(&self) -> Vec<SubjectProfile> {
        let mut order: Vec<usize> = (0..self.subjects).map(|i| i % self.ahi_bands.len().max(1)).collect();
        order.shuffle(&mut substream(self.seed, 0));
        (0..self.subjects)
            .map(|i| {
                let mut rng = substream(self.seed, 1000 + i as u64);
                let epochs = (self.duration / EPOCH_LEN).ceil() as usize;
                let stages = physiology::synthesize_hypnogram(epochs, &mut rng);
                let target = self
                    .ahi_bands
                    .get(order[i])
                    .map(|&(lo, hi)| rng.gen_range(lo..=hi))
                    .unwrap_or(0.0);
                let mut ev_rng = substream(rng.gen(), STREAM_EVENTS);
                let plan = physiology::synthesize_event_plan(
                    &stages,
                    target,
                    &self.kind_mix,
                    self.min_event_gap,
                    &mut ev_rng,
                );
                let coupling = plan
                    .iter()
                    .map(|e| {
                        let p_none = if e.kind == EventKind::CA {
                            self.uncoupled_ca
                        } else {
                            self.uncoupled_other
                        };
                        if ev_rng.gen::<f64>() < p_none {
                            return None;
                        }
                        let depth = match e.kind {
                            EventKind::CA => ev_rng.gen_range(3..=6),
                            EventKind::OA => ev_rng.gen_range(3..=8),
                            EventKind::MA => ev_rng.gen_range(4..=9),
                            EventKind::HP => ev_rng.gen_range(3..=5),
                        };
                        Some(Desaturation {
                            depth,
                            delay: ev_rng.gen_range(10.0..30.0),
                        })
                    })
                    .collect();
                SubjectProfile {
                    id: format!("S{i:02}"),
                    seed: rng.gen(),
                    duration: self.duration,
                    radar: self.radar,
                    render: self.render,
                    bed_range: rng.gen_range(0.6..1.1),
                    breathing_rate: rng.gen_range(0.2..0.3),
                    breathing_amplitude: rng.gen_range(3e-4..5e-4),
                    event_plan: plan,
                    stage_plan: stages,
                    od_coupling: coupling,
                    artifact_plan: Vec::new(),
                    physiology: self.physiology,
                    spo2: self.spo2,
                }
            })
            .collect()
    }
}
