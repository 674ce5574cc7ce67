//! Multi-level rewards: per-step exploration terms, a set-level diversity
//! bonus over the K scanpaths of one image, and pairwise task rewards
//! computed from assessor scores.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_ops::{shannon_entropy, ssim, to_gray, RgbImage, DEFAULT_BINS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardCoeffs {
    pub lambda_ent: f64,
    pub lambda_ssim: f64,
    pub lambda_nov: f64,
    pub lambda_eqb: f64,
    pub gamma_eq: f64,
    pub beta_cov: f64,
    pub beta_jac: f64,
    /// Targets of the task-reward ramp.
    pub lambda_mse: f64,
    pub lambda_rank: f64,
}

impl Default for RewardCoeffs {
    fn default() -> Self {
        Self {
            lambda_ent: 0.1,
            lambda_ssim: 0.5,
            lambda_nov: 0.5,
            lambda_eqb: 0.3,
            gamma_eq: 1.5,
            beta_cov: 1.0,
            beta_jac: 0.5,
            lambda_mse: 1.0,
            lambda_rank: 1.0,
        }
    }
}

impl RewardCoeffs {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_ent,
            self.lambda_ssim,
            self.lambda_nov,
            self.lambda_eqb,
            self.beta_cov,
            self.beta_jac,
            self.lambda_mse,
            self.lambda_rank,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("reward coefficients must be finite and nonnegative".into()));
        }
        if !(self.gamma_eq.is_finite() && self.gamma_eq > 0.0) {
            return Err(Error::Config("gamma_eq must be positive".into()));
        }
        Ok(())
    }
}

/// What a step reward is computed from. `previous` is absent exactly at
/// the first step; `visited` lists the viewports chosen before this one.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub current: &'a RgbImage,
    pub previous: Option<&'a RgbImage>,
    pub index: usize,
    pub visited: &'a [usize],
    pub pitch: f64,
}

impl StepContext<'_> {
    pub fn terms(&self) -> Result<StepTerms> {
        let cur = to_gray(self.current);
        let ssim_prev = match self.previous {
            Some(prev) => Some(ssim(&to_gray(prev), &cur)?),
            None => None,
        };
        Ok(StepTerms {
            entropy: shannon_entropy(&cur, DEFAULT_BINS),
            ssim_prev,
            novel: !self.visited.contains(&self.index),
            pitch: self.pitch,
        })
    }
}

/// Image measurements behind one step reward, usually read from a cache.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    /// Histogram entropy of the viewport, bits.
    pub entropy: f64,
    /// SSIM against the previous viewport, absent at the first step.
    pub ssim_prev: Option<f64>,
    pub novel: bool,
    pub pitch: f64,
}

/// Weighted contributions of each step term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepBreakdown {
    pub ent: f64,
    pub ssim: f64,
    pub nov: f64,
    pub eqb: f64,
}

impl StepBreakdown {
    pub fn total(&self) -> f64 {
        self.ent + self.ssim + self.nov + self.eqb
    }
}

pub fn equator_bias(pitch: f64, gamma_eq: f64) -> Result<f64> {
    if !(pitch.abs() <= FRAC_PI_2 + 1e-12) {
        return Err(Error::contract(format!("pitch {pitch} outside [-pi/2, pi/2]")));
    }
    Ok((-gamma_eq * pitch.abs()).exp())
}

pub fn step_breakdown(t: &StepTerms, c: &RewardCoeffs) -> Result<StepBreakdown> {
    Ok(StepBreakdown {
        ent: c.lambda_ent * t.entropy,
        ssim: t.ssim_prev.map_or(0.0, |s| c.lambda_ssim * (1.0 - s)),
        nov: if t.novel { c.lambda_nov } else { 0.0 },
        eqb: c.lambda_eqb * equator_bias(t.pitch, c.gamma_eq)?,
    })
}

pub fn step_reward(ctx: &StepContext, c: &RewardCoeffs) -> Result<f64> {
    Ok(step_breakdown(&ctx.terms()?, c)?.total())
}

/// Union coverage `|U S_k| / X` and mean pairwise Jaccard similarity over
/// ordered pairs (zero for a single path).
pub fn diversity_terms(paths: &[Vec<usize>], x: usize) -> Result<(f64, f64)> {
    if paths.is_empty() || paths.iter().any(|p| p.is_empty()) {
        return Err(Error::invalid("diversity needs non-empty scanpaths"));
    }
    if x == 0 || paths.iter().flatten().any(|&j| j >= x) {
        return Err(Error::invalid(format!("viewport index out of range for X = {x}")));
    }
    let sets: Vec<BTreeSet<usize>> = paths.iter().map(|p| p.iter().copied().collect()).collect();
    let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let coverage = union.len() as f64 / x as f64;
    let k = sets.len();
    if k < 2 {
        return Ok((coverage, 0.0));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let inter = sets[i].intersection(&sets[j]).count() as f64;
            let uni = sets[i].union(&sets[j]).count() as f64;
            total += inter / uni;
        }
    }
    // each unordered pair appears twice among the K(K-1) ordered pairs
    Ok((coverage, 2.0 * total / (k * (k - 1)) as f64))
}

pub fn diversity_reward(paths: &[Vec<usize>], x: usize, beta_cov: f64, beta_jac: f64) -> Result<f64> {
    let (cov, jac) = diversity_terms(paths, x)?;
    Ok(beta_cov * cov - beta_jac * jac)
}

pub fn mse_reward(qh1: f64, qh2: f64, q1: f64, q2: f64) -> f64 {
    -((qh1 - q1).powi(2) + (qh2 - q2).powi(2))
}

/// `sign(q1 - q2)`, zero for tied labels.
pub fn label_sign(q1: f64, q2: f64) -> f64 {
    if q1 > q2 {
        1.0
    } else if q1 < q2 {
        -1.0
    } else {
        0.0
    }
}

/// `-log(1 + exp(-s (qh1 - qh2)))`; tied labels give `-log 2`.
pub fn rank_reward(qh1: f64, qh2: f64, q1: f64, q2: f64) -> f64 {
    -crate::diffcore::softplus(-label_sign(q1, q2) * (qh1 - qh2))
}

/// Mean per-path step return plus the episodic terms.
pub fn total_reward(step_sums: &[f64], r_div: f64, r_mse: f64, r_rank: f64, lambda_mse: f64, lambda_rank: f64) -> Result<f64> {
    if step_sums.is_empty() {
        return Err(Error::invalid("total reward needs at least one path"));
    }
    let mean = step_sums.iter().sum::<f64>() / step_sums.len() as f64;
    Ok(mean + episodic_value(r_div, r_mse, r_rank, lambda_mse, lambda_rank))
}

pub fn episodic_value(r_div: f64, r_mse: f64, r_rank: f64, lambda_mse: f64, lambda_rank: f64) -> f64 {
    r_div + lambda_mse * r_mse + lambda_rank * r_rank
}

/// Per-step rewards and done flags for one path: the step terms, with the
/// episodic value added to the terminal step. Each of the K paths of an
/// image receives the full episodic value, so the mean path return equals
/// the image's total reward.
pub fn assign_step_rewards(step: &[f64], episodic: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    let t = step.len();
    if t == 0 {
        return Err(Error::invalid("empty trajectory"));
    }
    let mut rewards = step.to_vec();
    rewards[t - 1] += episodic;
    let dones = (0..t).map(|i| i + 1 == t).collect();
    Ok((rewards, dones))
}

/// One row of the per-episode reward log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub ent: f64,
    pub ssim: f64,
    pub nov: f64,
    pub eqb: f64,
    pub div_cov: f64,
    pub div_jac: f64,
    pub mse: f64,
    pub rank: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub const COLUMNS: [&'static str; 9] = ["ent", "ssim", "nov", "eqb", "div_cov", "div_jac", "mse", "rank", "total"];

    pub fn values(&self) -> [f64; 9] {
        [self.ent, self.ssim, self.nov, self.eqb, self.div_cov, self.div_jac, self.mse, self.rank, self.total]
    }

    /// Element-wise mean of rows; zeros for no rows.
    pub fn mean(rows: &[RewardBreakdown]) -> RewardBreakdown {
        let mut acc = [0.0; 9];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        let n = rows.len().max(1) as f64;
        let m = acc.map(|a| a / n);
        RewardBreakdown {
            ent: m[0],
            ssim: m[1],
            nov: m[2],
            eqb: m[3],
            div_cov: m[4],
            div_jac: m[5],
            mse: m[6],
            rank: m[7],
            total: m[8],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn unit() -> RewardCoeffs {
        RewardCoeffs {
            lambda_ent: 1.0,
            lambda_ssim: 1.0,
            lambda_nov: 1.0,
            lambda_eqb: 1.0,
            gamma_eq: 1.0,
            beta_cov: 1.0,
            beta_jac: 1.0,
            lambda_mse: 1.0,
            lambda_rank: 1.0,
        }
    }

    #[test]
    fn repeated_constant_viewport_scores_one() {
        let img = RgbImage::filled(24, 24, [0.4, 0.4, 0.4]);
        let ctx = StepContext { current: &img, previous: Some(&img), index: 3, visited: &[3], pitch: 0.0 };
        assert_eq!(step_reward(&ctx, &unit()).unwrap(), 1.0);
    }

    #[test]
    fn first_step_has_no_dissimilarity_term() {
        let mut r = rng(1);
        let img = RgbImage::from_fn(24, 24, |_, _| [r.random(), r.random(), r.random()]);
        let c = RewardCoeffs { lambda_ssim: 1000.0, ..unit() };
        let t = StepContext { current: &img, previous: None, index: 0, visited: &[], pitch: 0.3 }.terms().unwrap();
        let b = step_breakdown(&t, &c).unwrap();
        assert_eq!(b.ssim, 0.0);
        assert_eq!(b.nov, 1.0);
        assert_eq!(b.eqb, (-0.3f64).exp());
    }

    #[test]
    fn equator_bias_values() {
        assert_eq!(equator_bias(0.0, 1.5).unwrap(), 1.0);
        let top = equator_bias(FRAC_PI_2, 1.0).unwrap();
        assert_eq!(top, (-FRAC_PI_2).exp());
        assert!((top - 0.20788).abs() < 1e-5);
        assert_eq!(equator_bias(-0.7, 1.3).unwrap(), equator_bias(0.7, 1.3).unwrap());
        assert!(equator_bias(2.0, 1.0).is_err());
    }

    #[test]
    fn diversity_examples() {
        let x = 32;
        let same = vec![vec![1, 2, 3]; 4];
        assert_eq!(diversity_reward(&same, x, 0.7, 0.4).unwrap(), 0.7 * 3.0 / 32.0 - 0.4);
        let disjoint = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
        assert_eq!(diversity_terms(&disjoint, x).unwrap(), (6.0 / 32.0, 0.0));
        let pair = vec![vec![0, 1, 2], vec![2, 3]];
        assert_eq!(diversity_terms(&pair, x).unwrap(), (4.0 / 32.0, 0.25));
        assert_eq!(diversity_reward(&pair, x, 1.0, 1.0).unwrap(), 4.0 / 32.0 - 0.25);
        assert_eq!(diversity_terms(&[vec![5]], x).unwrap(), (1.0 / 32.0, 0.0));
        assert!(diversity_reward(&[vec![]], x, 1.0, 1.0).is_err());
    }

    #[test]
    fn task_reward_examples() {
        assert_eq!(mse_reward(1.0, 2.0, 1.0, 2.0), 0.0);
        assert_eq!(mse_reward(2.0, 1.0, 1.0, 2.0), -2.0);
        assert_eq!(mse_reward(2.0, 1.0, 1.0, 2.0), mse_reward(1.0, 2.0, 2.0, 1.0));
        assert_eq!(rank_reward(5.0, 5.0, 1.0, 0.0), -std::f64::consts::LN_2);
        assert_eq!(rank_reward(3.0, 1.0, 4.0, 4.0), -std::f64::consts::LN_2);
        let good = rank_reward(60.0, 50.0, 2.0, 1.0);
        assert!((good - -(-10f64).exp().ln_1p()).abs() < 1e-15);
        assert!((good - -4.54e-5).abs() < 1e-7);
        let bad = rank_reward(50.0, 60.0, 2.0, 1.0);
        assert!((bad - -(10f64).exp().ln_1p()).abs() < 1e-12);
        assert!((bad - -10.0000454).abs() < 1e-7);
    }

    #[test]
    fn total_reward_example() {
        let ln2 = std::f64::consts::LN_2;
        let v = total_reward(&[3.0, 5.0], 0.5, -1.0, -ln2, 1.0, 1.0).unwrap();
        assert!((v - (4.0 + 0.5 - 1.0 - ln2)).abs() < 1e-12);
        assert!((v - 2.8069).abs() < 1e-4);
        assert_eq!(total_reward(&[0.0, 0.0], 0.0, 0.0, 0.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(total_reward(&[0.0], 0.0, -4.0, -2.0, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn assignment_telescopes_to_the_total() {
        let mut r = rng(2);
        for _ in 0..200 {
            let k = r.random_range(1..6);
            let t = r.random_range(1..9);
            let steps: Vec<Vec<f64>> = (0..k).map(|_| (0..t).map(|_| r.random_range(-1.0..2.0)).collect()).collect();
            let (div, mse, rank) = (r.random_range(-1.0..1.0), -r.random::<f64>(), -r.random::<f64>());
            let (lm, lr) = (r.random::<f64>(), r.random::<f64>());
            let e = episodic_value(div, mse, rank, lm, lr);
            let sums: Vec<f64> = steps.iter().map(|s| s.iter().sum()).collect();
            let total = total_reward(&sums, div, mse, rank, lm, lr).unwrap();
            let mut returns = 0.0;
            for s in &steps {
                let (rw, dones) = assign_step_rewards(s, e).unwrap();
                let per_path = rw.iter().sum::<f64>();
                assert!((per_path - (s.iter().sum::<f64>() + e)).abs() < 1e-12);
                assert_eq!(dones.iter().filter(|d| **d).count(), 1);
                assert!(dones[t - 1]);
                returns += per_path;
            }
            assert!((returns - k as f64 * total).abs() < 1e-12 * k as f64 * (1.0 + total.abs()));
        }
        let (rw, _) = assign_step_rewards(&[0.25, 0.5], 0.0).unwrap();
        assert_eq!(rw, vec![0.25, 0.5]);
    }

    #[test]
    fn breakdown_mean() {
        let a = RewardBreakdown { ent: 1.0, total: 2.0, ..Default::default() };
        let b = RewardBreakdown { ent: 3.0, total: 4.0, ..Default::default() };
        let m = RewardBreakdown::mean(&[a, b]);
        assert_eq!((m.ent, m.total), (2.0, 3.0));
    }

    #[test]
    fn coefficient_validation() {
        assert!(RewardCoeffs::default().validate().is_ok());
        assert!(RewardCoeffs { gamma_eq: 0.0, ..Default::default() }.validate().is_err());
        assert!(RewardCoeffs { beta_jac: -1.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn paths_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
            prop::collection::vec(prop::collection::vec(0usize..16, 1..6), 1..6)
        }

        proptest! {
            #[test]
            fn diversity_is_permutation_invariant(paths in paths_strategy(), seed in any::<u64>()) {
                let mut shuffled = paths.clone();
                shuffled.shuffle(&mut rng(seed));
                let a = diversity_reward(&paths, 16, 1.0, 0.5).unwrap();
                let b = diversity_reward(&shuffled, 16, 1.0, 0.5).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn overlap_penalty_needs_overlap(paths in paths_strategy()) {
                let (_, jac) = diversity_terms(&paths, 16).unwrap();
                let sets: Vec<BTreeSet<usize>> = paths.iter().map(|p| p.iter().copied().collect()).collect();
                let any_overlap = (0..sets.len()).any(|i| (i + 1..sets.len()).any(|j| !sets[i].is_disjoint(&sets[j])));
                prop_assert_eq!(jac > 0.0, any_overlap);
            }

            #[test]
            fn identical_paths_score_below_mixed_sets_with_same_union(
                base in prop::collection::btree_set(0usize..16, 2..8),
                k in 2usize..5,
            ) {
                let path: Vec<usize> = base.iter().copied().collect();
                let identical = vec![path.clone(); k];
                // same union, first path trimmed to a strict subset
                let mut mixed = identical.clone();
                mixed[0] = path[..path.len() - 1].to_vec();
                let a = diversity_reward(&identical, 16, 1.0, 0.5).unwrap();
                let b = diversity_reward(&mixed, 16, 1.0, 0.5).unwrap();
                prop_assert!(a < b);
            }

            #[test]
            fn rank_reward_increases_with_signed_margin(d1 in -50.0f64..50.0, gap in 1e-3f64..20.0) {
                let lo = rank_reward(d1, 0.0, 1.0, 0.0);
                let hi = rank_reward(d1 + gap, 0.0, 1.0, 0.0);
                prop_assert!(hi > lo);
                prop_assert!(mse_reward(d1, 0.0, d1, 0.0) == 0.0);
                prop_assert!(mse_reward(d1 + gap, 0.0, d1, 0.0) < 0.0);
            }

            #[test]
            fn step_reward_ignores_index_labels_that_keep_history(
                ent in 0.0f64..8.0, s in -1.0f64..1.0, pitch in -1.5f64..1.5,
                idx in 0usize..32, shift in 1usize..32, seen in any::<bool>(),
            ) {
                let relabel = |j: usize| (j + shift) % 32;
                let visited = if seen { vec![idx, 7] } else { vec![(idx + 1) % 32] };
                let novel = !visited.contains(&idx);
                let other: Vec<usize> = visited.iter().map(|&j| relabel(j)).collect();
                let novel2 = !other.contains(&relabel(idx));
                prop_assert_eq!(novel, novel2);
                let c = RewardCoeffs::default();
                let a = step_breakdown(&StepTerms { entropy: ent, ssim_prev: Some(s), novel, pitch }, &c).unwrap();
                let b = step_breakdown(&StepTerms { entropy: ent, ssim_prev: Some(s), novel: novel2, pitch }, &c).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
