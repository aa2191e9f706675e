//! Chest-displacement, body-movement, hypnogram and event-plan synthesis.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::profile::{PlannedEvent, SubjectProfile, EPOCH_LEN};
use crate::types::{EventKind, SleepStage};

/// Length of the cosine ramps at event boundaries (s).
const EVENT_RAMP: f64 = 2.0;

struct StageTraits {
    rate: f64,
    amplitude: f64,
    /// Per-breath amplitude jitter (relative std).
    irregularity: f64,
    /// Movement-burst probability per epoch.
    movement: f64,
}

fn traits(s: SleepStage) -> StageTraits {
    match s {
        SleepStage::W => StageTraits {
            rate: 1.15,
            amplitude: 0.9,
            irregularity: 0.3,
            movement: 0.6,
        },
        SleepStage::R => StageTraits {
            rate: 1.08,
            amplitude: 0.8,
            irregularity: 0.2,
            movement: 0.03,
        },
        SleepStage::N1 => StageTraits {
            rate: 1.02,
            amplitude: 0.95,
            irregularity: 0.1,
            movement: 0.05,
        },
        SleepStage::N2 => StageTraits {
            rate: 0.97,
            amplitude: 1.0,
            irregularity: 0.05,
            movement: 0.01,
        },
        SleepStage::N3 => StageTraits {
            rate: 0.92,
            amplitude: 1.1,
            irregularity: 0.03,
            movement: 0.005,
        },
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth 0→1 ramp over `[0, 1]`.
fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    0.5 - 0.5 * (PI * x).cos()
}

/// Breathing-envelope level and phase-jitter strength at time `t` for one event.
struct EventShape {
    start: f64,
    end: f64,
    /// Envelope level in the first and second half.
    levels: (f64, f64),
    /// Phase-irregularity std (rad per breath) in each half.
    jitter: (f64, f64),
}

impl EventShape {
    fn new<R: Rng + ?Sized>(e: &PlannedEvent, rng: &mut R) -> Self {
        let oa = |rng: &mut R| rng.gen_range(0.2..0.4);
        let (levels, jitter) = match e.kind {
            EventKind::CA => ((0.02, 0.02), (0.0, 0.0)),
            EventKind::OA => {
                let l = oa(rng);
                ((l, l), (0.8, 0.8))
            }
            EventKind::MA => {
                let l = oa(rng);
                ((0.02, l), (0.0, 0.8))
            }
            EventKind::HP => {
                let l = rng.gen_range(0.3..0.7);
                ((l, l), (0.0, 0.0))
            }
        };
        Self {
            start: e.start,
            end: e.end(),
            levels,
            jitter,
        }
    }

    /// `(envelope, jitter)` at `t`, or `None` outside the event.
    fn at(&self, t: f64) -> Option<(f64, f64)> {
        if t < self.start || t >= self.end {
            return None;
        }
        let mid = 0.5 * (self.start + self.end);
        let (level, jit) = if t < mid {
            (self.levels.0, self.jitter.0)
        } else {
            (self.levels.1, self.jitter.1)
        };
        // Ramp from full breathing into the event level and back out.
        let into = smoothstep((t - self.start) / EVENT_RAMP);
        let out = smoothstep((self.end - t) / EVENT_RAMP);
        let w = into.min(out);
        Some((1.0 - w * (1.0 - level), jit * w))
    }
}

/// Chest displacement `d[t]` and movement `m[t]` sampled at the frame rate.
pub fn synthesize_motion<R: Rng + ?Sized>(profile: &SubjectProfile, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let fs = profile.radar.frame_rate;
    let n = profile.num_frames();
    let stages = profile.stages();
    let opts = profile.physiology;
    let stage_at = |t: f64| stages[((t / EPOCH_LEN) as usize).min(stages.len() - 1)];

    let mut events: Vec<&PlannedEvent> = profile.event_plan.iter().collect();
    events.sort_by(|a, b| a.start.total_cmp(&b.start));
    let shapes: Vec<EventShape> = events.iter().map(|e| EventShape::new(e, rng)).collect();

    let mut d = vec![0.0; n];
    let mut phase = 0.0;
    // Slowly drifting rate and per-breath amplitude multipliers.
    let mut drift = 0.0f64;
    let mut breath_amp = 1.0;
    let mut phase_jitter = 0.0;
    let mut jitter_target = 0.0;
    let mut next_event = 0;
    let mut breaths_done = 0.0;
    for (k, dk) in d.iter_mut().enumerate() {
        let t = k as f64 / fs;
        let tr = if opts.variability {
            traits(stage_at(t))
        } else {
            StageTraits {
                rate: 1.0,
                amplitude: 1.0,
                irregularity: 0.0,
                movement: 0.0,
            }
        };
        while next_event < shapes.len() && shapes[next_event].end <= t {
            next_event += 1;
        }
        let (env, jit) = shapes
            .get(next_event)
            .and_then(|s| s.at(t))
            .unwrap_or((1.0, 0.0));
        let mut recovery = 1.0;
        if opts.recovery_breaths && next_event > 0 {
            let since = t - shapes[next_event - 1].end;
            if (0.0..10.0).contains(&since) {
                recovery = 1.0 + 0.4 * (1.0 - since / 10.0);
            }
        }
        let rate = profile.breathing_rate * tr.rate * (1.0 + drift);
        phase += 2.0 * PI * rate / fs;
        let cycles = phase / (2.0 * PI);
        if cycles - breaths_done >= 1.0 {
            breaths_done = cycles.floor();
            if opts.variability {
                drift = 0.97 * drift + 0.01 * gauss(rng);
                drift = drift.clamp(-0.25, 0.25);
                breath_amp = (1.0 + tr.irregularity * gauss(rng)).clamp(0.3, 1.8);
            }
            jitter_target = if jit > 0.0 { jit * gauss(rng) } else { 0.0 };
        }
        // Phase irregularity follows its per-breath target smoothly.
        phase_jitter += (jitter_target - phase_jitter) * (2.0 / fs).min(1.0);
        let amp = profile.breathing_amplitude * tr.amplitude * breath_amp * env * recovery;
        *dk = amp * (phase + phase_jitter).sin();
    }

    let mut m = vec![0.0; n];
    if opts.movement {
        let add_burst = |m: &mut [f64], start: f64, dur: f64, amp: f64, rng: &mut R| {
            let f1 = rng.gen_range(0.8..3.0);
            let f2 = rng.gen_range(0.8..3.0);
            let p1 = rng.gen_range(0.0..2.0 * PI);
            let p2 = rng.gen_range(0.0..2.0 * PI);
            let k0 = (start * fs).max(0.0) as usize;
            let k1 = (((start + dur) * fs) as usize).min(m.len());
            for (k, mk) in m.iter_mut().enumerate().take(k1).skip(k0) {
                let t = k as f64 / fs;
                let w = (PI * (t - start) / dur).sin().powi(2);
                *mk += amp * w * (0.6 * (2.0 * PI * f1 * t + p1).sin() + 0.4 * (2.0 * PI * f2 * t + p2).sin());
            }
        };
        for (e, &stage) in stages.iter().enumerate() {
            let p = traits(stage).movement;
            if rng.gen::<f64>() < p {
                let start = e as f64 * EPOCH_LEN + rng.gen_range(0.0..EPOCH_LEN);
                let dur = rng.gen_range(2.0..10.0);
                let amp = rng.gen_range(2e-3..6e-3);
                add_burst(&mut m, start, dur, amp, rng);
            }
        }
        for s in &shapes {
            if rng.gen::<f64>() < 0.25 {
                let dur = rng.gen_range(2.0..4.0);
                let amp = rng.gen_range(1e-3..3e-3);
                add_burst(&mut m, s.end, dur, amp, rng);
            }
        }
    }
    (d, m)
}

/// Plausible overnight hypnogram of `epochs` 30 s epochs: sleep-onset wake,
/// ~90 min NREM/REM cycles with deep sleep front-loaded, awakenings, and
/// final wake.
pub fn synthesize_hypnogram<R: Rng + ?Sized>(epochs: usize, rng: &mut R) -> Vec<SleepStage> {
    use SleepStage::*;
    let mut out = Vec::with_capacity(epochs + 64);
    let final_wake = rng.gen_range(6..30).min(epochs / 4);
    let push = |out: &mut Vec<SleepStage>, s: SleepStage, n: usize| out.extend(std::iter::repeat(s).take(n));
    push(&mut out, W, rng.gen_range(10..40).min(epochs / 4));
    let mut cycle = 0;
    while out.len() + final_wake < epochs {
        push(&mut out, N1, rng.gen_range(2..8));
        push(&mut out, N2, rng.gen_range(20..50));
        if rng.gen::<f64>() < 0.3 {
            push(&mut out, W, rng.gen_range(1..3));
            push(&mut out, N1, rng.gen_range(1..3));
            push(&mut out, N2, rng.gen_range(5..15));
        }
        let deep = if cycle < 2 {
            rng.gen_range(10..50)
        } else {
            rng.gen_range(0..15)
        };
        push(&mut out, N3, deep);
        push(&mut out, N2, rng.gen_range(5..20));
        let rem = if cycle == 0 {
            rng.gen_range(6..20)
        } else {
            rng.gen_range(20..50)
        };
        push(&mut out, R, rem);
        if rng.gen::<f64>() < 0.7 {
            push(&mut out, W, rng.gen_range(4..20));
        }
        cycle += 1;
    }
    out.truncate(epochs.saturating_sub(final_wake));
    let rest = epochs - out.len();
    push(&mut out, W, rest);
    out
}

/// Event type mix used by [`synthesize_event_plan`] as `(CA, OA, MA, HP)`
/// probabilities.
pub const DEFAULT_KIND_MIX: [f64; 4] = [0.1, 0.5, 0.1, 0.3];

fn draw_kind<R: Rng + ?Sized>(mix: &[f64; 4], rng: &mut R) -> EventKind {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, &p) in EventKind::ALL.iter().zip(mix) {
        if u < p {
            return *k;
        }
        u -= p;
    }
    EventKind::HP
}

fn draw_duration<R: Rng + ?Sized>(kind: EventKind, rng: &mut R) -> f64 {
    let (lo, hi) = match kind {
        EventKind::CA => (10.0, 25.0),
        EventKind::OA => (12.0, 50.0),
        EventKind::MA => (20.0, 50.0),
        EventKind::HP => (12.0, 40.0),
    };
    (rng.gen_range(lo..hi) as f64).round()
}

/// Places about `target_ahi × TST` events fully inside sleep epochs, with at
/// least `min_gap` seconds between consecutive events.
pub fn synthesize_event_plan<R: Rng + ?Sized>(
    stages: &[SleepStage],
    target_ahi: f64,
    mix: &[f64; 4],
    min_gap: f64,
    rng: &mut R,
) -> Vec<PlannedEvent> {
    let duration = stages.len() as f64 * EPOCH_LEN;
    let tst_h = stages.iter().filter(|s| s.is_sleep()).count() as f64 * EPOCH_LEN / 3600.0;
    let wanted = (target_ahi * tst_h).round() as usize;
    let asleep = |a: f64, b: f64| {
        let e0 = (a / EPOCH_LEN).floor() as usize;
        let e1 = ((b / EPOCH_LEN).ceil() as usize).min(stages.len());
        e0 < e1 && stages[e0..e1].iter().all(|s| s.is_sleep())
    };
    let mut plan: Vec<PlannedEvent> = Vec::with_capacity(wanted);
    for _ in 0..wanted {
        let kind = draw_kind(mix, rng);
        let dur = draw_duration(kind, rng);
        for _ in 0..400 {
            let start = rng.gen_range(0.0..(duration - dur)).floor();
            let end = start + dur;
            if !asleep(start, end) {
                continue;
            }
            let clash = plan
                .iter()
                .any(|p| start < p.end() + min_gap && p.start < end + min_gap);
            if clash {
                continue;
            }
            plan.push(PlannedEvent {
                kind,
                start,
                duration: dur,
            });
            break;
        }
    }
    plan.sort_by(|a, b| a.start.total_cmp(&b.start));
    plan
}
