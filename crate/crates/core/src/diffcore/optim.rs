use serde::{Deserialize, Serialize};

use super::params::ParameterSet;

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_global_norm(params: &mut ParameterSet, max_norm: f64) -> f64 {
    debug_assert!(max_norm > 0.0);
    let norm = params.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for id in params.ids().collect::<Vec<_>>() {
            params.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers mirror the layout of the
/// [`ParameterSet`] they were created for.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParameterSet, cfg: AdamConfig) -> Self {
        let zeros = |params: &ParameterSet| {
            params
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update using the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParameterSet, lr: f64) {
        self.t += 1;
        adam_update(params, lr, self.cfg, self.t, &mut self.m, &mut self.v);
    }
}

/// One Adam update at step `t >= 1` with explicit moment buffers.
pub fn adam_update(
    params: &mut ParameterSet,
    lr: f64,
    cfg: AdamConfig,
    t: u64,
    m: &mut [Vec<f64>],
    v: &mut [Vec<f64>],
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let grad = params.grad(id).data().to_vec();
        let (mk, vk) = (&mut m[k], &mut v[k]);
        let value = params.value_mut(id).data_mut();
        for i in 0..grad.len() {
            let g = grad[i];
            mk[i] = cfg.beta1 * mk[i] + (1.0 - cfg.beta1) * g;
            vk[i] = cfg.beta2 * vk[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = mk[i] / bc1;
            let v_hat = vk[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
