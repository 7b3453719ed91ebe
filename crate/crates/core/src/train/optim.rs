//! Adam with bias correction and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.values.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid("adam: gradient/state layout does not match parameters"));
    }
    let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.values.len())).collect();
    for &(id, n) in &ids {
        if grads.get(id).len() != n || state.m[id.index()].len() != n {
            return Err(Error::invalid(format!(
                "adam: shape mismatch for {}",
                params.get(id).name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (id, _) in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let p = params.values_mut(id);
        for k in 0..p.len() {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 2,
            min_delta: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauState {
    pub best: f64,
    pub bad_epochs: usize,
}

impl Default for PlateauState {
    fn default() -> Self {
        PlateauState {
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl PlateauState {
    /// Feeds one epoch's monitored loss and returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f64, config: &PlateauConfig) -> f64 {
        if loss < self.best - config.min_delta {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= config.patience {
            self.bad_epochs = 0;
            lr * config.factor
        } else {
            lr
        }
    }
}

/// Learning rate after replaying a whole loss history through the schedule.
pub fn reduce_on_plateau(lr: f64, history: &[f64], config: &PlateauConfig) -> f64 {
    let mut state = PlateauState::default();
    history.iter().fold(lr, |lr, &loss| state.observe(loss, lr, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add("x", vec![1], vec![value]).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut ps = scalar_params(0.75);
        let mut st = AdamState::new(&ps);
        let g = ps.zero_grads();
        for _ in 0..3 {
            adam_step(&mut ps, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(ps.flatten(), vec![0.75]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_params(0.0);
        let mut st = AdamState::new(&ps);
        let mut g = ps.zero_grads();
        g.get_mut(ps.id("x").unwrap())[0] = 1.0;
        adam_step(&mut ps, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((ps.flatten()[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_layout_checked() {
        let run = || {
            let mut ps = scalar_params(0.3);
            let mut st = AdamState::new(&ps);
            let mut g = ps.zero_grads();
            g.get_mut(ps.id("x").unwrap())[0] = -0.4;
            adam_step(&mut ps, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            adam_step(&mut ps, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            ps.flatten()
        };
        assert_eq!(run(), run());
        let mut ps = scalar_params(0.0);
        let other = {
            let mut o = ParamSet::new();
            o.add_zeros("y", vec![2]).unwrap();
            o
        };
        let mut st = AdamState::new(&ps);
        assert!(adam_step(&mut ps, &other.zero_grads(), &mut st, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn plateau_schedule() {
        let cfg = PlateauConfig::default();
        assert_eq!(reduce_on_plateau(1.0, &[5.0, 4.0, 3.0, 2.0], &cfg), 1.0);
        assert_eq!(reduce_on_plateau(1.0, &[2.0, 2.0, 2.0], &cfg), 0.5);
        assert_eq!(reduce_on_plateau(1.0, &[2.0; 5], &cfg), 0.25);
        // improvements smaller than min_delta do not count
        assert_eq!(reduce_on_plateau(1.0, &[2.0, 1.99995, 1.9999], &cfg), 0.5);
    }
}
