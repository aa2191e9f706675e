//! Staging losses on the autodiff tape. Logits are `[n, 5]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::SleepStage;

pub const STAGES: usize = 5;

fn check_logits(tape: &Tape, y: Var, op: &'static str) -> Result<usize> {
    let s = tape.shape(y);
    if s.len() != 2 || s[1] != STAGES || s[0] == 0 {
        return Err(Error::shape(op, format!("logits {s:?}")));
    }
    Ok(s[0])
}

/// `−(1/N)·Σ ω[s*]·(1 − p)²·ln p` with `p` the softmax probability of the
/// true stage.
pub fn focal_loss(tape: &mut Tape, y: Var, truth: &[usize], weights: &[f64; STAGES]) -> Result<Var> {
    let n = check_logits(tape, y, "focal_loss")?;
    if truth.len() != n || truth.iter().any(|&s| s >= STAGES) {
        return Err(Error::shape("focal_loss", format!("{} labels for {n} epochs", truth.len())));
    }
    let logp = tape.log_softmax_rows(y)?;
    let lp = tape.pick(logp, truth)?;
    let p = tape.exp(lp);
    let q = tape.one_minus(p);
    let q2 = tape.square(q);
    let w = tape.constant(Tensor::from_vec(truth.iter().map(|&s| weights[s]).collect()));
    let t = tape.mul(q2, lp)?;
    let t = tape.mul(t, w)?;
    let s = tape.sum(t);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Mean squared step between consecutive logit vectors; zero for one epoch.
pub fn change_loss(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = check_logits(tape, y, "change_loss")?;
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let next = tape.slice(y, 0, 1, n - 1)?;
    let prev = tape.slice(y, 0, 0, n - 1)?;
    let d = tape.sub(next, prev)?;
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, 1.0 / (n - 1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationConfig {
    /// Minimum stage durations (s) in `[W, R, N1, N2, N3]` order.
    pub t_min: [f64; STAGES],
    /// Unit duration (s); one epoch.
    pub unit: f64,
    /// Use `(1 − C)·d` in the expected-duration recurrence instead of
    /// `(1 − p)·d`.
    pub printed_recurrence: bool,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            t_min: [60.0, 60.0, 30.0, 30.0, 60.0],
            unit: 30.0,
            printed_recurrence: false,
        }
    }
}

/// `Σ_{n≥1} Σ_i ReLU(T_i − C_{n−1,i})·(1 − p_{n,i})` with expected durations
/// `C_0 = 0`, `C_n = p_{n−1}·(C_{n−1} + d) + (1 − p_{n−1})·d`.
pub fn duration_loss(tape: &mut Tape, y: Var, config: &DurationConfig) -> Result<Var> {
    let n = check_logits(tape, y, "duration_loss")?;
    if n < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = config.unit;
    let p = tape.softmax_rows(y)?;
    let mut c = tape.constant(Tensor::zeros(&[STAGES]));
    let mut cs = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        cs.push(c);
        if k + 1 == n - 1 {
            break;
        }
        let pk = tape.row(p, k)?;
        let cd = tape.add_scalar(c, d);
        let keep = tape.mul(pk, cd)?;
        let fresh = if config.printed_recurrence { tape.one_minus(c) } else { tape.one_minus(pk) };
        let fresh = tape.scale(fresh, d);
        c = tape.add(keep, fresh)?;
    }
    let cmat = tape.concat(&cs, 0)?;
    let cmat = tape.reshape(cmat, &[n - 1, STAGES])?;
    let t = tape.constant(Tensor::new(
        vec![n - 1, STAGES],
        (0..n - 1).flat_map(|_| config.t_min).collect(),
    )?);
    let gap = tape.sub(t, cmat)?;
    let gap = tape.relu(gap);
    let later = tape.slice(p, 0, 1, n - 1)?;
    let miss = tape.one_minus(later);
    let prod = tape.mul(gap, miss)?;
    Ok(tape.sum(prod))
}

/// Negative log-likelihood of the true stage path under the CRF.
pub fn crf_loss(tape: &mut Tape, y: Var, a: Var, truth: &[usize]) -> Result<Var> {
    check_logits(tape, y, "crf_loss")?;
    tape.crf_nll(y, a, truth)
}

/// Weights of the four staging losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub focal: f64,
    pub change: f64,
    pub duration: f64,
    pub crf: f64,
}

/// `α·focal + β·change + γ·duration/((N−1)·d) + η·crf`. Terms with zero
/// weight are not built. The duration term is rescaled to a per-epoch,
/// per-unit value so its size is comparable to the averaged terms.
pub fn total_loss(
    tape: &mut Tape,
    y: Var,
    a: Var,
    truth: &[usize],
    class_weights: &[f64; STAGES],
    weights: &LossWeights,
    duration: &DurationConfig,
) -> Result<(Var, LossComponents)> {
    let n = check_logits(tape, y, "total_loss")?;
    let mut parts = LossComponents::default();
    let mut terms = Vec::new();
    if weights.alpha != 0.0 {
        let l = focal_loss(tape, y, truth, class_weights)?;
        parts.focal = tape.value(l).item();
        terms.push(tape.scale(l, weights.alpha));
    }
    if weights.beta != 0.0 {
        let l = change_loss(tape, y)?;
        parts.change = tape.value(l).item();
        terms.push(tape.scale(l, weights.beta));
    }
    if weights.gamma != 0.0 && n >= 2 {
        let l = duration_loss(tape, y, duration)?;
        let l = tape.scale(l, 1.0 / ((n - 1) as f64 * duration.unit));
        parts.duration = tape.value(l).item();
        terms.push(tape.scale(l, weights.gamma));
    }
    if weights.eta != 0.0 {
        let l = crf_loss(tape, y, a, truth)?;
        let l = tape.scale(l, 1.0 / n as f64);
        parts.crf = tape.value(l).item();
        terms.push(tape.scale(l, weights.eta));
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    for &t in terms.iter().skip(1) {
        total = tape.add(total, t)?;
    }
    Ok((total, parts))
}

/// Inverse-frequency stage weights normalised to mean 1 over the stages that
/// occur; stages that never occur get weight 1.
pub fn stage_weights<'a>(hypnograms: impl IntoIterator<Item = &'a [SleepStage]>) -> [f64; STAGES] {
    let mut counts = [0usize; STAGES];
    for h in hypnograms {
        for s in h {
            counts[s.index()] += 1;
        }
    }
    let inv: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).collect();
    let mut w = [1.0; STAGES];
    if inv.is_empty() {
        return w;
    }
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 {
            w[k] = (1.0 / c as f64) / mean;
        }
    }
    w
}
