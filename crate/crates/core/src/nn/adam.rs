use serde::{Deserialize, Serialize};

use super::MlpParams;
use crate::error::{Error, Result};

/// Adam hyperparameters and the learning-rate schedule.
///
/// The rate stays at `learning_rate` up to `decay_start`, then decays
/// exponentially to `learning_rate · 0.001` at `total_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Numerical stabiliser added to `sqrt(v̂)`.
    pub epsilon: f64,
    pub decay_start: u64,
    pub total_iters: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_start: 25_000,
            total_iters: 50_000,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.learning_rate, self.beta1, self.beta2, self.epsilon]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config(
                "Adam learning rate and epsilon must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate used for update number `t` (1-based).
pub fn learning_rate(config: &AdamConfig, t: u64) -> f64 {
    let (start, end) = (config.decay_start, config.total_iters);
    if t <= start || end <= start {
        return config.learning_rate;
    }
    let progress = (t.min(end) - start) as f64 / (end - start) as f64;
    config.learning_rate * 0.001f64.powf(progress)
}

/// Optimiser moments; `m` and `v` mirror the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: MlpParams,
    pub v: MlpParams,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &MlpParams) -> Self {
        Self {
            config,
            step_count: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Applies one bias-corrected Adam update and returns the learning rate used.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &MlpParams) -> Result<f64> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Config(
            "parameter, gradient and optimiser shapes differ".into(),
        ));
    }
    state.step_count += 1;
    let t = state.step_count;
    let cfg = state.config;
    let lr = learning_rate(&cfg, t);
    let correction1 = 1.0 - cfg.beta1.powf(t as f64);
    let correction2 = 1.0 - cfg.beta2.powf(t as f64);

    let moments = state.m.values_mut().zip(state.v.values_mut());
    for ((p, &g), (m, v)) in params.values_mut().zip(grads.values()).zip(moments) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / correction1;
        let v_hat = *v / correction2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(lr)
}
