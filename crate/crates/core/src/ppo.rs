//! PPO pieces: generalized advantage estimation, the clipped surrogate
//! loss with value and entropy terms, and the linear schedules.
//!
//! The training loop that drives these lives in [`crate::trainer`].

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_start: f64,
    pub clip_end: f64,
    pub value_coef: f64,
    pub entropy_start: f64,
    pub entropy_end: f64,
    pub update_epochs: usize,
    /// Images per PPO minibatch; 0 means the whole collected batch.
    pub minibatch: usize,
    pub max_grad_norm: f64,
    /// Fraction of training over which the task-reward weights ramp up.
    pub task_ramp: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip_start: 0.2,
            clip_end: 0.1,
            value_coef: 0.5,
            entropy_start: 0.01,
            entropy_end: 0.001,
            update_epochs: 4,
            minibatch: 0,
            max_grad_norm: 1.0,
            task_ramp: 0.2,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) || !unit(self.lambda) || !unit(self.task_ramp) {
            return Err(Error::Config("gamma, lambda and task_ramp must lie in [0, 1]".into()));
        }
        if !(self.clip_start > 0.0 && self.clip_end > 0.0) {
            return Err(Error::Config("clip range must be positive".into()));
        }
        if [self.value_coef, self.entropy_start, self.entropy_end, self.max_grad_norm]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("PPO coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-path RL record; all arrays have length `T`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn advantages(&self, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        gae(&self.rewards, &self.values, &self.dones, 0.0, gamma, lambda)
    }
}

/// `delta_t = r_t + gamma (1 - d_t) V_{t+1} - V_t`,
/// `A_t = delta_t + gamma lambda (1 - d_t) A_{t+1}`, `R_t = A_t + V_t`,
/// with `bootstrap` standing in for the value after the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::contract(format!(
            "gae lengths {} / {} / {}",
            n,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * next_value - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Standardizes in place (zero mean, unit variance, `1e-8` guard).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / sd);
}

/// Per-sample clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Flattened batch of samples for one PPO loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct PpoSamples {
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// Loss for minimization:
/// `-mean(surrogate) + c_v mean((V - R)^2) - c_H mean(H)`.
/// `log_probs`, `values` and `entropy` are vectors aligned with `s`.
pub fn ppo_loss(
    tape: &mut Tape,
    log_probs: Var,
    values: Var,
    entropy: Var,
    s: &PpoSamples,
    eps: f64,
    value_coef: f64,
    entropy_coef: f64,
) -> Result<(Var, PpoStats)> {
    let n = s.old_log_probs.len();
    for (what, v) in [("log_probs", log_probs), ("values", values), ("entropy", entropy)] {
        if tape.value(v).len() != n {
            return Err(Error::contract(format!("{what} has {} entries for {n} samples", tape.value(v).len())));
        }
    }
    if s.advantages.len() != n || s.returns.len() != n || n == 0 {
        return Err(Error::contract("PPO sample arrays differ in length"));
    }
    let old = tape.constant(Tensor::vector(s.old_log_probs.clone()));
    let diff = tape.sub(log_probs, old)?;
    let ratio = tape.exp(diff);
    if !tape.value(ratio).all_finite() {
        return Err(Error::Diverged(format!(
            "non-finite importance ratio (max log-ratio {})",
            tape.value(diff).data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    let adv = tape.constant(Tensor::vector(s.advantages.clone()));
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(s1, s2)?;
    let surr = tape.mean(surr);
    let policy = tape.scale(surr, -1.0);
    let ret = tape.constant(Tensor::vector(s.returns.clone()));
    let err = tape.sub(values, ret)?;
    let sq = tape.square(err);
    let value = tape.mean(sq);
    let ent = tape.mean(entropy);
    let vterm = tape.scale(value, value_coef);
    let eterm = tape.scale(ent, -entropy_coef);
    let loss = tape.add_all(&[policy, vterm, eterm])?;
    let clip_fraction = tape
        .value(ratio)
        .data()
        .iter()
        .filter(|&&r| (r - 1.0).abs() > eps)
        .count() as f64
        / n as f64;
    let stats = PpoStats {
        policy_loss: tape.scalar(policy),
        value_loss: tape.scalar(value),
        entropy: tape.scalar(ent),
        clip_fraction,
    };
    Ok((loss, stats))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub clip: f64,
    pub entropy_coef: f64,
    pub lambda_mse: f64,
    pub lambda_rank: f64,
}

/// Linear interpolation from start (epoch 0) to end (last epoch); the task
/// weights ramp from 0 to their targets over the first `task_ramp` of
/// training and then hold.
pub fn schedule(epoch: usize, total_epochs: usize, cfg: &PpoConfig, lambda_mse: f64, lambda_rank: f64) -> Result<Schedule> {
    if epoch >= total_epochs {
        return Err(Error::contract(format!("epoch {epoch} of {total_epochs}")));
    }
    let frac = if total_epochs > 1 { epoch as f64 / (total_epochs - 1) as f64 } else { 0.0 };
    let lerp = |a: f64, b: f64| a + (b - a) * frac;
    let ramp_epochs = cfg.task_ramp * total_epochs as f64;
    let ramp = if ramp_epochs > 0.0 { (epoch as f64 / ramp_epochs).min(1.0) } else { 1.0 };
    Ok(Schedule {
        clip: lerp(cfg.clip_start, cfg.clip_end),
        entropy_coef: lerp(cfg.entropy_start, cfg.entropy_end),
        lambda_mse: lambda_mse * ramp,
        lambda_rank: lambda_rank * ramp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParameterSet;
    use crate::testutil::{fd_grad, rel_error, rng};
    use rand::Rng;

    /// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, truncated at the first
    /// terminal step.
    fn brute_gae(r: &[f64], v: &[f64], d: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| {
                let next = if d[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { 0.0 };
                r[t] + gamma * next - v[t]
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut total = 0.0;
                for l in 0..n - t {
                    total += (gamma * lambda).powi(l as i32) * delta[t + l];
                    if d[t + l] {
                        break;
                    }
                }
                total
            })
            .collect()
    }

    #[test]
    fn gae_collapses_without_discount() {
        let r = [1.0, -2.0, 0.5];
        let v = [0.3, 0.1, -0.4];
        let (a, ret) = gae(&r, &v, &[false, false, true], 0.0, 0.0, 0.95).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], r[t] - v[t]);
            assert_eq!(ret[t], a[t] + v[t]);
        }
        let (a, _) = gae(&[2.0], &[0.5], &[true], 7.0, 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.5]);
        assert!(gae(&[1.0], &[1.0, 2.0], &[true], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn gae_matches_brute_force_expansion() {
        let mut r = rng(1);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = r.random_range(1..=12);
            let gamma = [0.0, 0.5, 0.99][r.random_range(0..3)];
            let lambda = [0.0, 0.95, 1.0][r.random_range(0..3)];
            let rw: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
            let d: Vec<bool> = (0..n).map(|t| t + 1 == n || r.random_bool(0.1)).collect();
            let (a, _) = gae(&rw, &v, &d, 0.0, gamma, lambda).unwrap();
            for (x, y) in a.iter().zip(brute_gae(&rw, &v, &d, gamma, lambda)) {
                worst = worst.max((x - y).abs());
            }
        }
        assert!(worst < 1e-10, "max error {worst}");
    }

    #[test]
    fn clip_branches() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert_eq!(clipped_surrogate(2.0, 1.5, 0.2), 1.2 * 1.5);
        assert_eq!(clipped_surrogate(0.5, -1.5, 0.2), 0.8 * -1.5);
        // the unclipped branch wins when it is smaller
        assert_eq!(clipped_surrogate(0.5, 1.5, 0.2), 0.5 * 1.5);
    }

    fn samples(r: &mut impl Rng, n: usize) -> PpoSamples {
        let mut adv: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        normalize_advantages(&mut adv);
        PpoSamples {
            old_log_probs: (0..n).map(|_| r.random_range(-3.0..-0.1)).collect(),
            advantages: adv,
            returns: (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    fn loss_from(p: &ParameterSet, t: &mut Tape, s: &PpoSamples, eps: f64) -> (Var, PpoStats) {
        let lp = t.param(p, p.id("lp").unwrap());
        let v = t.param(p, p.id("v").unwrap());
        let z = t.param(p, p.id("z").unwrap());
        let n = s.old_log_probs.len();
        let z = t.reshape(z, &[n, 3]).unwrap();
        let h = t.entropy_rows(z).unwrap();
        ppo_loss(t, lp, v, h, s, eps, 0.5, 0.01).unwrap()
    }

    #[test]
    fn identical_policies_give_zero_surrogate() {
        let mut r = rng(2);
        let s = samples(&mut r, 20);
        let mut p = ParameterSet::new();
        p.insert("lp", Tensor::vector(s.old_log_probs.clone())).unwrap();
        p.insert("v", Tensor::vector(vec![0.0; 20])).unwrap();
        p.insert("z", Tensor::vector(vec![0.0; 60])).unwrap();
        let mut t = Tape::new();
        let (_, stats) = loss_from(&p, &mut t, &s, 0.2);
        assert!(stats.policy_loss.abs() < 1e-10);
        assert_eq!(stats.clip_fraction, 0.0);
        // uniform over three actions
        assert!((stats.entropy - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = rng(3);
        for _ in 0..20 {
            let s = samples(&mut r, 8);
            let mut p = ParameterSet::new();
            // ratios well inside or outside the clip band, away from its edges
            let lp: Vec<f64> = s
                .old_log_probs
                .iter()
                .map(|o| {
                    let d = if r.random_bool(0.5) { r.random_range(-0.1..0.1) } else { r.random_range(0.3..0.6) };
                    o + d
                })
                .collect();
            p.insert("lp", Tensor::vector(lp)).unwrap();
            p.insert("v", Tensor::vector((0..8).map(|_| r.random_range(-1.0..1.0)).collect())).unwrap();
            p.insert("z", Tensor::vector((0..24).map(|_| r.random_range(-2.0..2.0)).collect())).unwrap();
            p.zero_grad();
            let mut t = Tape::new();
            let (l, _) = loss_from(&p, &mut t, &s, 0.2);
            t.backward(l, &mut p).unwrap();
            let analytic = p.flat_grads();
            let numeric = fd_grad(&mut p, 1e-6, |q| {
                let mut t = Tape::new();
                let (l, _) = loss_from(q, &mut t, &s, 0.2);
                t.scalar(l)
            });
            let err = rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn non_finite_ratio_is_divergence() {
        let s = PpoSamples { old_log_probs: vec![-800.0], advantages: vec![1.0], returns: vec![0.0] };
        let mut t = Tape::new();
        let lp = t.constant(Tensor::vector(vec![0.0]));
        let v = t.constant(Tensor::vector(vec![0.0]));
        let h = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(ppo_loss(&mut t, lp, v, h, &s, 0.2, 0.5, 0.01), Err(Error::Diverged(_))));
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = PpoConfig::default();
        let s0 = schedule(0, 101, &cfg, 1.0, 2.0).unwrap();
        assert_eq!((s0.clip, s0.entropy_coef, s0.lambda_mse, s0.lambda_rank), (0.2, 0.01, 0.0, 0.0));
        let s_end = schedule(100, 101, &cfg, 1.0, 2.0).unwrap();
        assert!((s_end.clip - 0.1).abs() < 1e-15 && (s_end.entropy_coef - 0.001).abs() < 1e-15);
        assert_eq!((s_end.lambda_mse, s_end.lambda_rank), (1.0, 2.0));
        let mid = schedule(50, 101, &cfg, 1.0, 2.0).unwrap();
        assert!((mid.clip - 0.15).abs() < 1e-15);
        assert!((mid.entropy_coef - 0.0055).abs() < 1e-15);
        let ramp = schedule(10, 100, &cfg, 1.0, 1.0).unwrap();
        assert!((ramp.lambda_mse - 0.5).abs() < 1e-15);
        assert_eq!(schedule(20, 100, &cfg, 1.0, 1.0).unwrap().lambda_mse, 1.0);
        assert!(schedule(5, 5, &cfg, 1.0, 1.0).is_err());
        assert_eq!(schedule(0, 1, &cfg, 1.0, 1.0).unwrap().clip, 0.2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_loss_ignores_advantage_scale(
                raw in prop::collection::vec(-5.0f64..5.0, 2..20),
                shift in prop::collection::vec(-0.5f64..0.5, 20),
                c in 0.01f64..100.0,
            ) {
                let n = raw.len();
                prop_assume!(raw.iter().any(|&a| (a - raw[0]).abs() > 1e-3));
                let old = vec![-1.0; n];
                let new: Vec<f64> = shift[..n].iter().map(|d| -1.0 + d).collect();
                let eval = |scale: f64| {
                    let mut adv: Vec<f64> = raw.iter().map(|a| a * scale).collect();
                    normalize_advantages(&mut adv);
                    let s = PpoSamples { old_log_probs: old.clone(), advantages: adv, returns: vec![0.0; n] };
                    let mut t = Tape::new();
                    let lp = t.constant(Tensor::vector(new.clone()));
                    let v = t.constant(Tensor::vector(vec![0.0; n]));
                    let h = t.constant(Tensor::vector(vec![0.5; n]));
                    let (l, _) = ppo_loss(&mut t, lp, v, h, &s, 0.2, 0.5, 0.01).unwrap();
                    t.scalar(l)
                };
                // exact up to the 1e-8 guard in the standard deviation
                let mean = raw.iter().sum::<f64>() / n as f64;
                let sd = (raw.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                let tol = 1e-12 + 4.0 * (n as f64).sqrt() * 1e-8 / (c.min(1.0) * sd);
                prop_assert!((eval(1.0) - eval(c)).abs() < tol);
            }

            #[test]
            fn entropy_term_is_analytic(z in prop::collection::vec(-8.0f64..8.0, 2..10)) {
                let p = crate::diffcore::softmax(&z).unwrap();
                let analytic: f64 = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
                let mut t = Tape::new();
                let zm = t.constant(Tensor::matrix(1, z.len(), z.clone()).unwrap());
                let h = t.entropy_rows(zm).unwrap();
                prop_assert!((t.value(h).data()[0] - analytic).abs() < 1e-10);
            }
        }
    }
}
