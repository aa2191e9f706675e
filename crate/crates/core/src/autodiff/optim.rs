use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 5.0,
        }
    }
}

/// Cosine annealing with warm restarts every `period` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let p = self.period.max(1);
        let phase = (epoch % p) as f64 / p as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

/// What to do when a gradient contains NaN or infinity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    #[default]
    Skip,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub schedule: CosineSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub non_finite: NonFinitePolicy,
}

impl TrainConfig {
    pub fn new(lr_max: f64, epochs: usize, seed: u64) -> Self {
        Self {
            adam: AdamConfig {
                lr: lr_max,
                ..AdamConfig::default()
            },
            schedule: CosineSchedule {
                lr_max,
                lr_min: lr_max * 0.01,
                period: epochs,
            },
            epochs,
            seed,
            non_finite: NonFinitePolicy::Skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr > 0.0) || !(self.schedule.lr_max > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.schedule.lr_min < 0.0 || self.schedule.lr_min > self.schedule.lr_max {
            return Err(Error::invalid("lr_min must lie in [0, lr_max]"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Adam with bias correction. Frozen parameters are left untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub non_finite: NonFinitePolicy,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            non_finite: NonFinitePolicy::Skip,
        }
    }

    pub fn step(
        &self,
        params: &mut ParamSet,
        grads: &[Tensor],
        state: &mut AdamState,
        lr: f64,
    ) -> Result<StepOutcome> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for (g, p) in grads.iter().zip(params.tensors()) {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return match self.non_finite {
                NonFinitePolicy::Skip => Ok(StepOutcome::SkippedNonFinite),
                NonFinitePolicy::Reject => Err(Error::NonFinite("gradient".into())),
            };
        }
        let c = &self.config;
        let frozen = params.frozen_mask().to_vec();
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm: f64 = grads
                .iter()
                .zip(&frozen)
                .filter(|(_, &f)| !f)
                .flat_map(|(g, _)| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            if frozen[k] {
                continue;
            }
            let g = grads[k].data();
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale + c.weight_decay * *w;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_midpoint_and_ends() {
        let s = CosineSchedule {
            lr_max: 1e-2,
            lr_min: 1e-4,
            period: 100,
        };
        assert!((s.lr(0) - 1e-2).abs() < 1e-15);
        assert!((s.lr(50) - (1e-2 + 1e-4) / 2.0).abs() < 1e-15);
        assert!((s.lr(100) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let cfg = AdamConfig {
            clip_norm: 0.0,
            ..AdamConfig::default()
        };
        let adam = Adam::new(cfg);
        let mut st = AdamState::new(&ps);
        let g = vec![Tensor::from_vec(vec![0.3, -0.7, 2.0])];
        adam.step(&mut ps, &g, &mut st, 0.01).unwrap();
        let before = [1.0, -2.0, 0.5];
        for (j, &gj) in [0.3f64, -0.7, 2.0].iter().enumerate() {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let m = (1.0 - cfg.beta1) * gj / (1.0 - cfg.beta1);
            let v = (1.0 - cfg.beta2) * gj * gj / (1.0 - cfg.beta2);
            let expect = before[j] - 0.01 * m / (v.sqrt() + cfg.eps);
            assert!((ps.get(id).data()[j] - expect).abs() < 1e-15);
            assert!(((before[j] - ps.get(id).data()[j]) - 0.01 * gj.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let adam = Adam::new(AdamConfig::default());
        let mut st = AdamState::new(&ps);
        let g = vec![Tensor::zeros(&[2])];
        adam.step(&mut ps, &g, &mut st, 0.1).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn frozen_params_untouched_and_nonfinite_policy() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::from_vec(vec![1.0]));
        ps.add("b", Tensor::from_vec(vec![1.0]));
        ps.set_frozen(a, true);
        let mut adam = Adam::new(AdamConfig::default());
        let mut st = AdamState::new(&ps);
        let g = vec![Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![1.0])];
        adam.step(&mut ps, &g, &mut st, 0.1).unwrap();
        assert_eq!(ps.tensors()[0].data(), &[1.0]);
        assert!(ps.tensors()[1].data()[0] < 1.0);

        let bad = vec![Tensor::from_vec(vec![f64::NAN]), Tensor::from_vec(vec![1.0])];
        let snapshot = ps.clone();
        assert_eq!(
            adam.step(&mut ps, &bad, &mut st, 0.1).unwrap(),
            StepOutcome::SkippedNonFinite
        );
        assert_eq!(ps, snapshot);
        adam.non_finite = NonFinitePolicy::Reject;
        assert!(matches!(
            adam.step(&mut ps, &bad, &mut st, 0.1),
            Err(Error::NonFinite(_))
        ));
    }
}
