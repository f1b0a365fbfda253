//! Nesterov-momentum SGD and the piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{ModelParams, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub velocity: Vec<T>,
}

impl<T: Real> OptState<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            velocity: vec![T::zero(); n],
        }
    }
}

/// One Nesterov update:
///   g' = g + wd * theta   (decay skipped for the head scale and bias)
///   v  = mu * v + g'
///   theta -= lr * (g' + mu * v)
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grad: &[T],
    state: &mut OptState<T>,
    lr: f64,
    cfg: &OptimizerConfig,
) {
    debug_assert_eq!(grad.len(), params.data.len());
    debug_assert_eq!(state.velocity.len(), params.data.len());
    let mu = T::from_f64(cfg.momentum);
    let wd = T::from_f64(cfg.weight_decay);
    let lr = T::from_f64(lr);
    let alpha_index = params.arch.alpha_index();
    for i in 0..params.data.len() {
        let mut g = grad[i];
        if i < alpha_index {
            g += wd * params.data[i];
        }
        let v = mu * state.velocity[i] + g;
        state.velocity[i] = v;
        params.data[i] -= lr * (g + mu * v);
    }
}

/// Piecewise-constant schedule: a sorted list of (starting epoch, rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule {
    pub stages: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(stages: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { stages };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        if self.stages[0].0 != 0 {
            return Err(Error::Config("schedule must start at epoch 0".into()));
        }
        for w in self.stages.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("schedule epochs must strictly increase".into()));
            }
        }
        if self.stages.iter().any(|&(_, r)| r <= 0.0) {
            return Err(Error::Config("schedule rates must be positive".into()));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let mut rate = self.stages[0].1;
        for &(start, r) in &self.stages {
            if epoch >= start {
                rate = r;
            } else {
                break;
            }
        }
        rate
    }

    /// Desk-scale default: 30 epochs, 0.05 decayed x0.1 at epochs 15 and 25.
    pub fn desk_default() -> Self {
        Self {
            stages: vec![(0, 0.05), (15, 0.005), (25, 0.0005)],
        }
    }

    /// The 60-epoch benchmark schedule: 0.1, then 0.006 / 0.0012 / 0.00024
    /// at epochs 20, 40, and 50.
    pub fn benchmark60() -> Self {
        Self {
            stages: vec![(0, 0.1), (20, 0.006), (40, 0.0012), (50, 0.00024)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::Geometry;
    use crate::learner::ArchConfig;

    fn tiny_params() -> ModelParams<f64> {
        let arch = ArchConfig::new(Geometry::new(1, 2, 2), vec![1]);
        ModelParams::zeros(arch).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut params = tiny_params();
        for (i, v) in params.data.iter_mut().enumerate() {
            *v = i as f64 * 0.1;
        }
        let before = params.data.clone();
        let grad = vec![0.0; params.data.len()];
        let mut state = OptState::zeros(params.data.len());
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut params, &grad, &mut state, 0.1, &cfg);
        assert_eq!(params.data, before);
    }

    #[test]
    fn single_step_no_momentum_definition() {
        let mut params = tiny_params();
        params.data[0] = 2.0;
        let mut grad = vec![0.0; params.data.len()];
        grad[0] = 0.5;
        let mut state = OptState::zeros(params.data.len());
        let cfg = OptimizerConfig {
            momentum: 0.0,
            weight_decay: 0.01,
        };
        sgd_step(&mut params, &grad, &mut state, 0.1, &cfg);
        // theta <- theta - lr * (g + wd * theta)
        let expected = 2.0 - 0.1 * (0.5 + 0.01 * 2.0);
        assert!((params.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_scalar_nesterov_recurrence() {
        // Oracle: theta0 = 1, g = 1, lr = 0.1, mu = 0.9, wd = 0.
        //   v1 = 1,     theta1 = 1 - 0.1 * (1 + 0.9 * 1)      = 0.81
        //   v2 = 1.9,   theta2 = 0.81 - 0.1 * (1 + 0.9 * 1.9) = 0.539
        let mut theta = 1.0f64;
        let mut v = 0.0f64;
        for _ in 0..2 {
            v = 0.9 * v + 1.0;
            theta -= 0.1 * (1.0 + 0.9 * v);
        }
        let oracle = theta;

        let mut params = tiny_params();
        params.data[0] = 1.0;
        let mut grad = vec![0.0; params.data.len()];
        grad[0] = 1.0;
        let mut state = OptState::zeros(params.data.len());
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut params, &grad, &mut state, 0.1, &cfg);
        sgd_step(&mut params, &grad, &mut state, 0.1, &cfg);
        assert!((params.data[0] - oracle).abs() < 1e-15);
        assert!((oracle - 0.539).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_skips_head_scalars() {
        let mut params = tiny_params();
        let alpha_index = params.arch.alpha_index();
        params.data[alpha_index] = 1.0;
        params.data[alpha_index + 1] = 0.5;
        let grad = vec![0.0; params.data.len()];
        let mut state = OptState::zeros(params.data.len());
        let cfg = OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.1,
        };
        sgd_step(&mut params, &grad, &mut state, 0.5, &cfg);
        assert_eq!(params.data[alpha_index], 1.0);
        assert_eq!(params.data[alpha_index + 1], 0.5);
    }

    #[test]
    fn schedule_boundaries() {
        let s = LrSchedule::new(vec![(0, 0.1), (3, 0.01), (7, 0.001)]).unwrap();
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(2), 0.1);
        assert_eq!(s.rate(3), 0.01);
        assert_eq!(s.rate(6), 0.01);
        assert_eq!(s.rate(7), 0.001);
        assert_eq!(s.rate(100), 0.001);
    }

    #[test]
    fn benchmark_schedule_values() {
        let s = LrSchedule::benchmark60();
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(19), 0.1);
        assert_eq!(s.rate(20), 0.006);
        assert_eq!(s.rate(40), 0.0012);
        assert_eq!(s.rate(50), 0.00024);
        assert_eq!(s.rate(59), 0.00024);
    }

    #[test]
    fn schedule_validation() {
        assert!(LrSchedule::new(vec![]).is_err());
        assert!(LrSchedule::new(vec![(1, 0.1)]).is_err());
        assert!(LrSchedule::new(vec![(0, 0.1), (0, 0.2)]).is_err());
        assert!(LrSchedule::new(vec![(0, -0.1)]).is_err());
    }
}
