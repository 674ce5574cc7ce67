//! Joint training loop: PPO on the viewport policy, with rewards partly
//! supplied by the assessor, and the assessor fitted on its loss stack
//! over the same scanpaths.
//!
//! Every random draw comes from a stream keyed by (seed, epoch, image), and
//! per-image work is reduced in image order, so results do not depend on
//! the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::diffcore::{clip_global_norm, Adam, AdamConfig, ParameterSet, Tape, Var};
use crate::env::{derive_seed, ImageEnv};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossComponents, ScoredImage};
use crate::metrics::{EvalReport, PlccMode, SweepRow};
use crate::model::{Model, Prediction};
use crate::policy::ActionMode;
use crate::ppo::{normalize_advantages, ppo_loss, schedule, PpoSamples, PpoStats, Schedule, Trajectory};
use crate::rewards::{diversity_terms, episodic_value, label_sign, mse_reward, rank_reward, assign_step_rewards, RewardBreakdown};

/// Which assessor score enters a path's task reward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRewardScope {
    /// The image score, averaged over all K paths.
    Image,
    /// The path's own score against the partner's image score.
    Path,
}

/// How augmented variants obtain scanpaths for the assessor losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantPaths {
    /// Reuse the clean image's paths.
    Shared,
    /// Roll the policy out again on each variant.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_policy: f64,
    pub lr_assessor: f64,
    pub k: usize,
    pub t: usize,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Keep the initial policy; only the assessor trains.
    pub freeze_policy: bool,
    pub task_reward_scope: TaskRewardScope,
    pub variant_paths: VariantPaths,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4,
            lr_policy: 3e-4,
            lr_assessor: 1e-4,
            k: 15,
            t: 7,
            eval_every: 1,
            freeze_policy: false,
            task_reward_scope: TaskRewardScope::Image,
            variant_paths: VariantPaths::Shared,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 || self.t == 0 || self.threads == 0 {
            return Err(Error::Config("epochs, batch_size, k, t and threads must be positive".into()));
        }
        if !(self.lr_policy >= 0.0 && self.lr_assessor >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_reward: f64,
    pub reward: RewardBreakdown,
    pub policy: PpoStats,
    pub losses: LossComponents,
    pub loss_total: f64,
    pub val: Option<(f64, f64)>,
}

impl EpochMetrics {
    pub fn header() -> Vec<String> {
        let mut h = vec!["epoch".to_string(), "mean_reward".to_string()];
        h.extend(RewardBreakdown::COLUMNS.iter().map(|c| format!("reward_{c}")));
        h.extend(["policy_loss", "value_loss", "entropy"].map(String::from));
        h.extend(LossComponents::COLUMNS.iter().map(|c| c.to_string()));
        h.extend(["loss_total", "val_srcc", "val_plcc"].map(String::from));
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.epoch.to_string(), self.mean_reward.to_string()];
        r.extend(self.reward.values().iter().map(f64::to_string));
        r.extend([self.policy.policy_loss, self.policy.value_loss, self.policy.entropy].map(|v| v.to_string()));
        r.extend(self.losses.values().iter().map(f64::to_string));
        r.push(self.loss_total.to_string());
        match self.val {
            Some((s, p)) => r.extend([s.to_string(), p.to_string()]),
            None => r.extend([String::new(), String::new()]),
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochMetrics>,
}

/// Files written by a run.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("model.ckpt")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

const STREAM_ROLLOUT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EVAL: u64 = 3;
const STREAM_VARIANT: u64 = 4;

/// What one rollout over one image produced, before any update.
struct Collected {
    paths: Vec<Vec<usize>>,
    log_probs: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    step: Vec<RewardBreakdown>,
    q_paths: Vec<f64>,
    q_hat: f64,
    variant_paths: Option<[Vec<Vec<usize>>; 3]>,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    crate::env::pool(threads)
}

fn paths_of(model: &Model, bank: &crate::features::FeatureBank, k: usize, t: usize, seed: u64) -> Result<(Vec<Vec<usize>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let eps = model.scanpaths(bank, k, t, seed, ActionMode::Sample)?;
    let mut paths = Vec::with_capacity(k);
    let mut lps = Vec::with_capacity(k);
    let mut vals = Vec::with_capacity(k);
    for e in eps {
        paths.push(e.path.indices);
        lps.push(e.path.log_probs);
        vals.push(e.values);
    }
    Ok((paths, lps, vals))
}

fn collect(model: &Model, env: &ImageEnv, cfg: &RunConfig, seed: u64, with_variants: bool) -> Result<Collected> {
    let tc = &cfg.train;
    let (paths, log_probs, values) = paths_of(model, &env.bank, tc.k, tc.t, seed)?;
    let mut step = Vec::with_capacity(paths.len());
    for p in &paths {
        let bd = env.step_breakdowns(p, &cfg.rewards)?;
        step.push(RewardBreakdown {
            ent: bd.iter().map(|b| b.ent).sum(),
            ssim: bd.iter().map(|b| b.ssim).sum(),
            nov: bd.iter().map(|b| b.nov).sum(),
            eqb: bd.iter().map(|b| b.eqb).sum(),
            ..RewardBreakdown::default()
        });
    }
    let (q_hat, q_paths) = model.assessor.predict_image(&model.assessor_params, &env.bank, &paths)?;
    let variant_paths = match (&env.variants, with_variants, tc.variant_paths) {
        (Some(vs), true, VariantPaths::Fresh) => {
            let mut out: Vec<Vec<Vec<usize>>> = Vec::with_capacity(3);
            for (l, bank) in vs.iter().enumerate() {
                out.push(paths_of(model, bank, tc.k, tc.t, derive_seed(seed, &[STREAM_VARIANT, l as u64]))?.0);
            }
            let [a, b, c]: [Vec<Vec<usize>>; 3] = out.try_into().expect("three severities");
            Some([a, b, c])
        }
        _ => None,
    };
    Ok(Collected { paths, log_probs, values, step, q_paths, q_hat, variant_paths })
}

/// Rewards, trajectories and the logged breakdown for one batch.
fn batch_rewards(envs: &[&ImageEnv], col: &[Collected], cfg: &RunConfig, sched: &Schedule) -> Result<(Vec<Vec<Trajectory>>, Vec<RewardBreakdown>)> {
    let c = &cfg.rewards;
    let n = envs.len();
    let x = envs[0].count();
    let mut trajs = Vec::with_capacity(n);
    let mut logged = Vec::new();
    for i in 0..n {
        let (cov, jac) = diversity_terms(&col[i].paths, x)?;
        let r_div = c.beta_cov * cov - c.beta_jac * jac;
        let partner = (n > 1).then(|| (i + 1) % n);
        let mut per_image = Vec::with_capacity(col[i].paths.len());
        for (k, path) in col[i].paths.iter().enumerate() {
            let (r_mse, r_rank) = match partner {
                Some(j) => {
                    let own = match cfg.train.task_reward_scope {
                        TaskRewardScope::Image => col[i].q_hat,
                        TaskRewardScope::Path => col[i].q_paths[k],
                    };
                    let (qi, qj) = (envs[i].mos, envs[j].mos);
                    (
                        mse_reward(own / 100.0, col[j].q_hat / 100.0, qi / 100.0, qj / 100.0),
                        if label_sign(qi, qj) == 0.0 { 0.0 } else { rank_reward(own, col[j].q_hat, qi, qj) },
                    )
                }
                None => (0.0, 0.0),
            };
            let episodic = episodic_value(r_div, r_mse, r_rank, sched.lambda_mse, sched.lambda_rank);
            let steps: Vec<f64> = envs[i].step_breakdowns(path, c)?.iter().map(|b| b.total()).collect();
            let (rewards, dones) = assign_step_rewards(&steps, episodic)?;
            let s = &col[i].step[k];
            let mut row = RewardBreakdown {
                div_cov: c.beta_cov * cov,
                div_jac: -c.beta_jac * jac,
                mse: sched.lambda_mse * r_mse,
                rank: sched.lambda_rank * r_rank,
                ..*s
            };
            row.total = rewards.iter().sum();
            logged.push(row);
            per_image.push(Trajectory {
                actions: path.clone(),
                old_log_probs: col[i].log_probs[k].clone(),
                values: col[i].values[k].clone(),
                rewards,
                dones,
            });
        }
        trajs.push(per_image);
    }
    Ok((trajs, logged))
}

/// PPO samples per image in `(step, path)` order, matching the layout of
/// the lockstep unroll.
fn samples_for(trajs: &[Vec<Trajectory>], gamma: f64, lambda: f64, normalize: bool) -> Result<Vec<PpoSamples>> {
    let mut per: Vec<Vec<(Vec<f64>, Vec<f64>)>> = trajs
        .iter()
        .map(|paths| paths.iter().map(|tr| tr.advantages(gamma, lambda)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    if normalize {
        let mut flat: Vec<f64> = per.iter().flatten().flat_map(|(a, _)| a.iter().copied()).collect();
        normalize_advantages(&mut flat);
        let mut it = flat.into_iter();
        for (a, _) in per.iter_mut().flatten() {
            a.iter_mut().for_each(|v| *v = it.next().expect("same length"));
        }
    }
    Ok(trajs
        .iter()
        .zip(&per)
        .map(|(paths, img)| {
            let mut s = PpoSamples::default();
            for step in 0..paths[0].len() {
                for (tr, (adv, ret)) in paths.iter().zip(img) {
                    s.old_log_probs.push(tr.old_log_probs[step]);
                    s.advantages.push(adv[step]);
                    s.returns.push(ret[step]);
                }
            }
            s
        })
        .collect())
}

/// Policy gradient of one image's PPO loss on a private parameter copy.
fn image_policy_grad(model: &Model, env: &ImageEnv, trajs: &[Vec<usize>], s: &PpoSamples, sched: &Schedule, cfg: &RunConfig) -> Result<(Vec<f64>, PpoStats)> {
    let (k, t) = (trajs.len(), trajs[0].len());
    let mut tape = Tape::new();
    let un = model.policy.unroll(&mut tape, &model.policy_params, &env.bank, k, t, |step, _| {
        Ok(trajs.iter().map(|p| p[step]).collect())
    })?;
    let lp = tape.concat(&un.logp);
    let vals = tape.concat(&un.values);
    let ent = tape.concat(&un.entropy);
    let vals = tape.reshape(vals, &[k * t])?;
    let (loss, stats) = ppo_loss(&mut tape, lp, vals, ent, s, sched.clip, cfg.ppo.value_coef, sched.entropy_coef)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Diverged(format!("non-finite PPO loss on {}", env.name)));
    }
    let mut params = model.policy_params.clone();
    params.zero_grad();
    tape.backward(loss, &mut params)?;
    Ok((params.flat_grads(), stats))
}

fn set_grads(params: &mut ParameterSet, flat: &[f64]) {
    let mut offset = 0;
    for id in params.ids().collect::<Vec<_>>() {
        let g = params.grad_mut(id).data_mut();
        g.copy_from_slice(&flat[offset..offset + g.len()]);
        offset += g.len();
    }
}

fn check_finite(params: &ParameterSet, what: &str) -> Result<()> {
    if params.iter().all(|(_, t)| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged(format!("non-finite {what} parameters")))
    }
}

fn ppo_update(
    model: &mut Model,
    adam: &mut Adam,
    envs: &[&ImageEnv],
    trajs: &[Vec<Trajectory>],
    sched: &Schedule,
    cfg: &RunConfig,
    pool: &rayon::ThreadPool,
) -> Result<PpoStats> {
    let samples = samples_for(trajs, cfg.ppo.gamma, cfg.ppo.lambda, cfg.ppo.normalize_advantages)?;
    let actions: Vec<Vec<Vec<usize>>> = trajs.iter().map(|ps| ps.iter().map(|t| t.actions.clone()).collect()).collect();
    let n = envs.len();
    let mb = if cfg.ppo.minibatch == 0 { n } else { cfg.ppo.minibatch.min(n) };
    let mut stats = PpoStats::default();
    let mut count = 0.0f64;
    for _ in 0..cfg.ppo.update_epochs {
        for chunk in (0..n).collect::<Vec<_>>().chunks(mb) {
            let m: &Model = model;
            let results: Vec<Result<(Vec<f64>, PpoStats)>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| image_policy_grad(m, envs[i], &actions[i], &samples[i], sched, cfg))
                    .collect()
            });
            let mut total = vec![0.0; model.policy_params.total_len()];
            for r in results {
                let (g, s) = r?;
                for (a, b) in total.iter_mut().zip(&g) {
                    *a += b;
                }
                stats.policy_loss += s.policy_loss;
                stats.value_loss += s.value_loss;
                stats.entropy += s.entropy;
                stats.clip_fraction += s.clip_fraction;
                count += 1.0;
            }
            let scale = 1.0 / chunk.len() as f64;
            total.iter_mut().for_each(|g| *g *= scale);
            if total.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged("non-finite policy gradient".into()));
            }
            set_grads(&mut model.policy_params, &total);
            clip_global_norm(&mut model.policy_params, cfg.ppo.max_grad_norm);
            adam.step(&mut model.policy_params, cfg.train.lr_policy);
            check_finite(&model.policy_params, "policy")?;
        }
    }
    let c = count.max(1.0);
    Ok(PpoStats {
        policy_loss: stats.policy_loss / c,
        value_loss: stats.value_loss / c,
        entropy: stats.entropy / c,
        clip_fraction: stats.clip_fraction / c,
    })
}

fn assessor_update(model: &mut Model, adam: &mut Adam, envs: &[&ImageEnv], col: &[Collected], cfg: &RunConfig) -> Result<(LossComponents, f64)> {
    let use_aug = cfg.losses.uses_augmentation();
    let mut tape = Tape::new();
    let mut items = Vec::with_capacity(envs.len());
    for (env, c) in envs.iter().zip(col) {
        let clean = model.assessor.score_image(&mut tape, &model.assessor_params, &env.bank, &c.paths)?;
        let variants = match (&env.variants, use_aug) {
            (Some(vs), true) => {
                let mut out: Vec<Var> = Vec::with_capacity(3);
                for (l, bank) in vs.iter().enumerate() {
                    let paths = c.variant_paths.as_ref().map_or(&c.paths, |vp| &vp[l]);
                    out.push(model.assessor.score_image(&mut tape, &model.assessor_params, bank, paths)?);
                }
                Some([out[0], out[1], out[2]])
            }
            _ => None,
        };
        items.push(ScoredImage { mos: env.mos, clean, variants });
    }
    let (loss, comp) = batch_loss(&mut tape, &items, &cfg.losses)?;
    let total = tape.scalar(loss);
    if !total.is_finite() || comp.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!("non-finite assessor loss {comp:?}")));
    }
    model.assessor_params.zero_grad();
    tape.backward(loss, &mut model.assessor_params)?;
    clip_global_norm(&mut model.assessor_params, cfg.ppo.max_grad_norm);
    adam.step(&mut model.assessor_params, cfg.train.lr_assessor);
    check_finite(&model.assessor_params, "assessor")?;
    Ok((comp, total))
}

/// Scores every image with `K` sampled paths under a fixed per-image seed.
pub fn predict_all(model: &Model, envs: &[ImageEnv], k: usize, t: usize, seed: u64, mode: ActionMode, threads: usize) -> Result<Vec<Prediction>> {
    let pool = thread_pool(threads)?;
    pool.install(|| {
        envs.par_iter()
            .enumerate()
            .map(|(i, e)| model.predict(&e.bank, k, t, derive_seed(seed, &[STREAM_EVAL, i as u64]), mode))
            .collect()
    })
}

pub fn evaluate(model: &Model, envs: &[ImageEnv], k: usize, t: usize, seed: u64, threads: usize) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = predict_all(model, envs, k, t, seed, ActionMode::Sample, threads)?;
    let labels: Vec<f64> = envs.iter().map(|e| e.mos).collect();
    let q: Vec<f64> = preds.iter().map(|p| p.q_hat).collect();
    Ok((EvalReport::new(&labels, &q, PlccMode::Raw)?, preds))
}

/// Evaluates every (K, T) cell under the same seed, K-major, timing each.
/// `T` beyond the grid size is rejected when revisits are masked.
pub fn sweep(model: &Model, envs: &[ImageEnv], ks: &[usize], ts: &[usize], seed: u64, threads: usize) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || ts.is_empty() || ks.contains(&0) || ts.contains(&0) {
        return Err(Error::Config("sweep needs nonempty, positive K and T lists".into()));
    }
    let mut rows = Vec::with_capacity(ks.len() * ts.len());
    for &k in ks {
        for &t in ts {
            let start = Instant::now();
            let (rep, _) = evaluate(model, envs, k, t, seed, threads)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            rows.push(SweepRow { k, t, srcc: rep.srcc, plcc: rep.plcc, wall_ms });
        }
    }
    Ok(rows)
}

fn save_atomic(model: &Model, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    model.save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Runs the joint loop from a fresh model. With `out_dir`, writes the
/// metrics CSV row by row and replaces the checkpoint after every
/// completed epoch, so a divergence leaves the last good one in place.
pub fn train(train: &[ImageEnv], val: &[ImageEnv], cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let model = Model::init(&cfg.policy, &cfg.assessor, cfg.seed)?;
    train_from(model, train, val, cfg, out_dir)
}

pub fn train_from(mut model: Model, train: &[ImageEnv], val: &[ImageEnv], cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let x = train[0].count();
    if train.iter().chain(val).any(|e| e.count() != x) {
        return Err(Error::Data("images disagree on the viewport grid".into()));
    }
    let pool = thread_pool(tc.threads)?;
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut w = csv::Writer::from_path(metrics_path(dir))?;
            w.write_record(EpochMetrics::header())?;
            w.flush().map_err(|e| Error::io(metrics_path(dir), e))?;
            Some(w)
        }
        None => None,
    };
    let mut policy_adam = Adam::new(&model.policy_params, AdamConfig::default());
    let mut assessor_adam = Adam::new(&model.assessor_params, AdamConfig::default());
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let sched = schedule(epoch, tc.epochs, &cfg.ppo, cfg.rewards.lambda_mse, cfg.rewards.lambda_rank)?;
        let mut order: Vec<usize> = (0..train.len()).collect();
        {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut rewards = Vec::new();
        let mut stats = Vec::new();
        let mut losses = LossComponents::default();
        let mut loss_total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(tc.batch_size) {
            let envs: Vec<&ImageEnv> = batch.iter().map(|&i| &train[i]).collect();
            let m = &model;
            let with_variants = cfg.losses.uses_augmentation();
            let col: Vec<Collected> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| collect(m, &train[i], cfg, derive_seed(cfg.seed, &[STREAM_ROLLOUT, epoch as u64, i as u64]), with_variants))
                    .collect::<Result<Vec<_>>>()
            })?;
            let (trajs, logged) = batch_rewards(&envs, &col, cfg, &sched)?;
            rewards.extend(logged);
            if !tc.freeze_policy {
                stats.push(ppo_update(&mut model, &mut policy_adam, &envs, &trajs, &sched, cfg, &pool)?);
            }
            let (comp, total) = assessor_update(&mut model, &mut assessor_adam, &envs, &col, cfg)?;
            losses.add(&comp);
            loss_total += total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let reward = RewardBreakdown::mean(&rewards);
        let ns = stats.len().max(1) as f64;
        let policy = PpoStats {
            policy_loss: stats.iter().map(|s| s.policy_loss).sum::<f64>() / ns,
            value_loss: stats.iter().map(|s| s.value_loss).sum::<f64>() / ns,
            entropy: stats.iter().map(|s| s.entropy).sum::<f64>() / ns,
            clip_fraction: stats.iter().map(|s| s.clip_fraction).sum::<f64>() / ns,
        };
        let last = epoch + 1 == tc.epochs;
        let val_metrics = if !val.is_empty() && tc.eval_every > 0 && (last || (epoch + 1) % tc.eval_every == 0) {
            match evaluate(&model, val, tc.k, tc.t, cfg.seed, tc.threads) {
                Ok((r, _)) => Some((r.srcc, r.plcc)),
                Err(Error::UndefinedCorrelation(_)) => Some((f64::NAN, f64::NAN)),
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let row = EpochMetrics {
            epoch,
            mean_reward: reward.total,
            reward,
            policy,
            losses: losses.scaled(1.0 / nb),
            loss_total: loss_total / nb,
            val: val_metrics,
        };
        if let (Some(w), Some(dir)) = (csv.as_mut(), out_dir) {
            w.write_record(row.record())?;
            w.flush().map_err(|e| Error::io(metrics_path(dir), e))?;
            save_atomic(&model, &checkpoint_path(dir))?;
        }
        history.push(row);
    }
    Ok(TrainOutcome { model, history })
}
