//! Auto-regressive viewport policy: a stacked GRU history encoder,
//! content-aware viewport scoring with a dynamic mask, and a critic head.
//!
//! All K scanpaths of one panorama are unrolled in lockstep, so hidden
//! states are `d_h x K` matrices and logits are `K x X`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::sphere::ViewportGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Feature dimension `d`.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub score_dim: usize,
    pub gru_layers: usize,
    pub critic_hidden: usize,
    /// Mask already-visited viewports.
    pub mask_revisits: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            hidden_dim: 64,
            score_dim: 64,
            gru_layers: 6,
            critic_hidden: 64,
            mask_revisits: true,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.hidden_dim == 0
            || self.score_dim == 0
            || self.gru_layers == 0
            || self.critic_hidden == 0
        {
            return Err(Error::Config("policy dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct GruLayer {
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    u_n: ParamId,
    b_n: ParamId,
}

/// Parameter handles of the policy and critic inside a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct PolicyNet {
    cfg: PolicyConfig,
    gru: Vec<GruLayer>,
    w_h: ParamId,
    w_g: ParamId,
    w_f: ParamId,
    b: ParamId,
    v: ParamId,
    c_w1h: ParamId,
    c_w1g: ParamId,
    c_b1: ParamId,
    c_w2: ParamId,
    c_b2: ParamId,
}

/// Parameter names and shapes, in insertion order.
fn layout(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>)> {
    let (d, h, z, c) = (cfg.feature_dim, cfg.hidden_dim, cfg.score_dim, cfg.critic_hidden);
    let mut out = Vec::new();
    for l in 0..cfg.gru_layers {
        let input = if l == 0 { d } else { h };
        for gate in ["z", "r", "n"] {
            out.push((format!("policy.gru{l}.w_{gate}"), vec![h, input]));
            out.push((format!("policy.gru{l}.u_{gate}"), vec![h, h]));
            out.push((format!("policy.gru{l}.b_{gate}"), vec![h]));
        }
    }
    out.push(("policy.w_h".into(), vec![z, h]));
    out.push(("policy.w_g".into(), vec![z, d]));
    out.push(("policy.w_f".into(), vec![z, d]));
    out.push(("policy.b".into(), vec![z]));
    out.push(("policy.v".into(), vec![z]));
    out.push(("critic.w1_h".into(), vec![c, h]));
    out.push(("critic.w1_g".into(), vec![c, d]));
    out.push(("critic.b1".into(), vec![c]));
    out.push(("critic.w2".into(), vec![1, c]));
    out.push(("critic.b2".into(), vec![1]));
    out
}

impl PolicyNet {
    /// Adds freshly initialized parameters to `params`: weights uniform in
    /// `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(cfg: &PolicyConfig, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        for (name, shape) in layout(cfg) {
            if shape.len() == 1 && name != "policy.v" {
                params.insert(name, Tensor::zeros(&shape))?;
            } else {
                let fan_in = *shape.last().expect("non-empty shape");
                params.insert_uniform(name, &shape, 1.0 / (fan_in as f64).sqrt(), rng)?;
            }
        }
        Self::bind(cfg, params)
    }

    /// Resolves handles in an existing set, checking every shape.
    pub fn bind(cfg: &PolicyConfig, params: &ParameterSet) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params.id(name).ok_or_else(|| Error::CheckpointIncompatible {
                entry: name.to_string(),
                detail: "missing".into(),
            })?;
            if params.value(id).shape() != shape {
                return Err(Error::CheckpointIncompatible {
                    entry: name.to_string(),
                    detail: format!("shape {:?}, expected {:?}", params.value(id).shape(), shape),
                });
            }
            Ok(id)
        };
        let shapes = layout(cfg);
        let mut ids = shapes.iter().map(|(n, s)| get(n, s)).collect::<Result<Vec<_>>>()?.into_iter();
        let mut next = || ids.next().expect("layout length");
        let gru = (0..cfg.gru_layers)
            .map(|_| GruLayer {
                w_z: next(),
                u_z: next(),
                b_z: next(),
                w_r: next(),
                u_r: next(),
                b_r: next(),
                w_n: next(),
                u_n: next(),
                b_n: next(),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            gru,
            w_h: next(),
            w_g: next(),
            w_f: next(),
            b: next(),
            v: next(),
            c_w1h: next(),
            c_w1g: next(),
            c_b1: next(),
            c_w2: next(),
            c_b2: next(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    /// One GRU layer on a batch of columns: `h: [d_h x K]`, `x: [in x K]`.
    pub fn gru_cell(&self, tape: &mut Tape, params: &ParameterSet, layer: usize, h: Var, x: Var) -> Result<Var> {
        let p = self
            .gru
            .get(layer)
            .ok_or_else(|| Error::contract(format!("GRU layer {layer} of {}", self.gru.len())))?;
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hin: Var| -> Result<Var> {
            let wv = tape.param(params, w);
            let uv = tape.param(params, u);
            let bv = tape.param(params, b);
            let wx = tape.matmul(wv, x)?;
            let uh = tape.matmul(uv, hin)?;
            let s = tape.add(wx, uh)?;
            tape.add_col(s, bv)
        };
        let z = gate(tape, p.w_z, p.u_z, p.b_z, h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, p.w_r, p.u_r, p.b_r, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = gate(tape, p.w_n, p.u_n, p.b_n, rh)?;
        let n = tape.tanh(n);
        // (1 - z) h + z n  ==  h + z (n - h)
        let diff = tape.sub(n, h)?;
        let step = tape.mul(z, diff)?;
        tape.add(h, step)
    }

    /// Standalone GRU layer update on vectors.
    pub fn gru_update(&self, params: &ParameterSet, layer: usize, h: &Tensor, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hv = tape.constant(as_column(h)?);
        let xv = tape.constant(as_column(x)?);
        let out = self.gru_cell(&mut tape, params, layer, hv, xv)?;
        Ok(Tensor::vector(tape.value(out).data().to_vec()))
    }

    /// Pieces of the scoring function that do not depend on history:
    /// `W_g g + b` as `[d_z]` and `W_f F` as `[d_z x X]`.
    fn score_context(&self, tape: &mut Tape, params: &ParameterSet, bank: &FeatureBank) -> Result<(Var, Var)> {
        let g = tape.constant(bank.global.clone());
        let f = tape.constant(bank.viewports.clone());
        let w_g = tape.param(params, self.w_g);
        let b = tape.param(params, self.b);
        let wg = tape.matvec(w_g, g)?;
        let gterm = tape.add(wg, b)?;
        let w_f = tape.param(params, self.w_f);
        let fterm = tape.matmul(w_f, f)?;
        Ok((gterm, fterm))
    }

    /// Logits `[K x X]` for top-layer states `h: [d_h x K]`.
    fn score_batch(&self, tape: &mut Tape, params: &ParameterSet, h: Var, ctx: (Var, Var), mask: Option<Var>) -> Result<Var> {
        let (gterm, fterm) = ctx;
        let k = tape.value(h).cols();
        let x = tape.value(fterm).cols();
        let w_h = tape.param(params, self.w_h);
        let a = tape.matmul(w_h, h)?;
        let a = tape.add_col(a, gterm)?;
        let o = tape.outer_add(a, fterm)?;
        let o = tape.tanh(o);
        let v = tape.param(params, self.v);
        let v = tape.reshape(v, &[1, self.cfg.score_dim])?;
        let z = tape.matmul(v, o)?;
        let z = tape.reshape(z, &[k, x])?;
        match mask {
            Some(m) => tape.add(z, m),
            None => Ok(z),
        }
    }

    fn critic_batch(&self, tape: &mut Tape, params: &ParameterSet, h: Var, g: Var) -> Result<Var> {
        let k = tape.value(h).cols();
        let w1h = tape.param(params, self.c_w1h);
        let w1g = tape.param(params, self.c_w1g);
        let b1 = tape.param(params, self.c_b1);
        let gt = tape.matvec(w1g, g)?;
        let gt = tape.add(gt, b1)?;
        let a = tape.matmul(w1h, h)?;
        let a = tape.add_col(a, gt)?;
        let a = tape.tanh(a);
        let w2 = tape.param(params, self.c_w2);
        let b2 = tape.param(params, self.c_b2);
        let y = tape.matmul(w2, a)?;
        let y = tape.add(y, b2)?;
        tape.reshape(y, &[k])
    }

    /// Logits for a single history state `h: [d_h]`. `mask` entries must be
    /// `0` or `-inf`.
    pub fn score_viewports(&self, params: &ParameterSet, h: &Tensor, bank: &FeatureBank, mask: &[f64]) -> Result<Tensor> {
        check_mask(mask, bank.count())?;
        let mut tape = Tape::new();
        let ctx = self.score_context(&mut tape, params, bank)?;
        let hv = tape.constant(as_column(h)?);
        let m = tape.constant(Tensor::matrix(1, mask.len(), mask.to_vec())?);
        let z = self.score_batch(&mut tape, params, hv, ctx, Some(m))?;
        Ok(Tensor::vector(tape.value(z).data().to_vec()))
    }

    /// Critic value of the state `[h; g]`.
    pub fn value(&self, params: &ParameterSet, h: &Tensor, g: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let hv = tape.constant(as_column(h)?);
        let gv = tape.constant(g.clone());
        let v = self.critic_batch(&mut tape, params, hv, gv)?;
        Ok(tape.value(v).data()[0])
    }

    /// Initial viewport from global context alone (zero history, no mask).
    pub fn select_initial(&self, params: &ParameterSet, bank: &FeatureBank, rng: &mut impl Rng) -> Result<usize> {
        let h = Tensor::zeros(&[self.cfg.hidden_dim]);
        let z = self.score_viewports(params, &h, bank, &vec![0.0; bank.count()])?;
        sample_categorical(&crate::diffcore::log_softmax(z.data())?, rng)
    }

    pub fn initial_state(&self, bank: &FeatureBank) -> PolicyState {
        PolicyState {
            h: vec![Tensor::zeros(&[self.cfg.hidden_dim]); self.cfg.gru_layers],
            g: bank.global.clone(),
            visited: Vec::new(),
            t: 0,
        }
    }

    /// One decision for a single path; returns the action, its log
    /// probability, the critic value of the current state, and the next
    /// state.
    pub fn step(
        &self,
        params: &ParameterSet,
        state: &PolicyState,
        bank: &FeatureBank,
        rng: &mut impl Rng,
        mask_policy: MaskPolicy,
        mode: ActionMode,
    ) -> Result<(usize, f64, f64, PolicyState)> {
        let x = bank.count();
        let mut mask = vec![0.0; x];
        if mask_policy == MaskPolicy::Revisits {
            for &j in &state.visited {
                mask[j] = f64::NEG_INFINITY;
            }
        }
        let top = state.h.last().expect("at least one layer");
        let z = self.score_viewports(params, top, bank, &mask)?;
        let lp = crate::diffcore::log_softmax(z.data())?;
        let action = match mode {
            ActionMode::Sample => sample_categorical(&lp, rng)?,
            ActionMode::Greedy => argmax(&lp),
        };
        let value = self.value(params, top, &bank.global)?;
        let mut tape = Tape::new();
        let mut input = tape.constant(Tensor::matrix(bank.dim(), 1, bank.viewport(action))?);
        let mut next_h = Vec::with_capacity(state.h.len());
        for (l, h) in state.h.iter().enumerate() {
            let hv = tape.constant(as_column(h)?);
            input = self.gru_cell(&mut tape, params, l, hv, input)?;
            next_h.push(Tensor::vector(tape.value(input).data().to_vec()));
        }
        let mut visited = state.visited.clone();
        visited.push(action);
        let next = PolicyState { h: next_h, g: state.g.clone(), visited, t: state.t + 1 };
        Ok((action, lp[action], value, next))
    }

    /// Unrolls `k` paths of length `t` in lockstep on `tape`. `choose`
    /// receives the step index and the `K x X` log-probabilities and returns
    /// one action per path.
    pub fn unroll<F>(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        bank: &FeatureBank,
        k: usize,
        t: usize,
        mut choose: F,
    ) -> Result<Unrolled>
    where
        F: FnMut(usize, &Tensor) -> Result<Vec<usize>>,
    {
        let x = bank.count();
        if k == 0 || t == 0 {
            return Err(Error::invalid("rollout needs K >= 1 and T >= 1"));
        }
        if self.cfg.mask_revisits && t > x {
            return Err(Error::invalid(format!("T = {t} exceeds X = {x} with revisit masking")));
        }
        if bank.dim() != self.cfg.feature_dim {
            return Err(Error::contract(format!(
                "feature dimension {} but policy expects {}",
                bank.dim(),
                self.cfg.feature_dim
            )));
        }
        let ctx = self.score_context(tape, params, bank)?;
        let g = tape.constant(bank.global.clone());
        let f = tape.constant(bank.viewports.clone());
        let mut hs: Vec<Var> = (0..self.cfg.gru_layers)
            .map(|_| tape.constant(Tensor::zeros(&[self.cfg.hidden_dim, k])))
            .collect();
        let mut mask = vec![0.0; k * x];
        let mut out = Unrolled::default();
        for step in 0..t {
            let top = *hs.last().expect("at least one layer");
            let m = if step > 0 && self.cfg.mask_revisits {
                Some(tape.constant(Tensor::matrix(k, x, mask.clone())?))
            } else {
                None
            };
            let logits = self.score_batch(tape, params, top, ctx, m)?;
            let lp = tape.log_softmax_rows(logits)?;
            let ent = tape.entropy_rows(logits)?;
            let value = self.critic_batch(tape, params, top, g)?;
            let actions = choose(step, tape.value(lp))?;
            if actions.len() != k || actions.iter().any(|&a| a >= x) {
                return Err(Error::contract(format!("chooser returned {actions:?} for K={k}, X={x}")));
            }
            let logp = tape.gather_rows(lp, &actions)?;
            if !tape.value(logp).all_finite() {
                return Err(Error::DegenerateDistribution);
            }
            if step + 1 < t {
                let mut input = tape.select_cols(f, &actions)?;
                for (l, h) in hs.iter_mut().enumerate() {
                    *h = self.gru_cell(tape, params, l, *h, input)?;
                    input = *h;
                }
                for (row, &a) in actions.iter().enumerate() {
                    mask[row * x + a] = f64::NEG_INFINITY;
                }
            }
            out.actions.push(actions);
            out.logp.push(logp);
            out.entropy.push(ent);
            out.values.push(value);
        }
        Ok(out)
    }

    /// Samples (or greedily decodes) `k` independent scanpaths.
    pub fn rollout(
        &self,
        params: &ParameterSet,
        bank: &FeatureBank,
        k: usize,
        t: usize,
        rng: &mut impl Rng,
        mode: ActionMode,
    ) -> Result<Vec<Episode>> {
        let mut tape = Tape::new();
        let un = self.unroll(&mut tape, params, bank, k, t, |_, lp| {
            lp.data()
                .chunks_exact(lp.cols())
                .map(|row| match mode {
                    ActionMode::Sample => sample_categorical(row, rng),
                    ActionMode::Greedy => Ok(argmax(row)),
                })
                .collect()
        })?;
        Ok((0..k)
            .map(|path| Episode {
                path: Scanpath {
                    indices: un.actions.iter().map(|a| a[path]).collect(),
                    log_probs: un.logp.iter().map(|&v| tape.value(v).data()[path]).collect(),
                },
                values: un.values.iter().map(|&v| tape.value(v).data()[path]).collect(),
            })
            .collect())
    }
}

fn as_column(v: &Tensor) -> Result<Tensor> {
    Tensor::matrix(v.len(), 1, v.data().to_vec())
}

fn check_mask(mask: &[f64], x: usize) -> Result<()> {
    if mask.len() != x {
        return Err(Error::contract(format!("mask length {} for {x} viewports", mask.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != f64::NEG_INFINITY) {
        return Err(Error::contract("mask entries must be 0 or -inf"));
    }
    Ok(())
}

/// Inverse-CDF draw from log-probabilities; zero-probability entries are
/// never returned.
pub fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> Result<usize> {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last = None;
    for (j, &l) in log_probs.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        cum += l.exp();
        last = Some(j);
        if u < cum {
            return Ok(j);
        }
    }
    last.ok_or(Error::DegenerateDistribution)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPolicy {
    Revisits,
    None,
}

/// Recurrent state of a single path. `h` holds one hidden vector per GRU
/// layer; the last one is the history summary used for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub h: Vec<Tensor>,
    pub g: Tensor,
    pub visited: Vec<usize>,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scanpath {
    pub indices: Vec<usize>,
    pub log_probs: Vec<f64>,
}

/// A sampled path with the critic values seen along it.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub path: Scanpath,
    pub values: Vec<f64>,
}

/// Tape handles produced by [`PolicyNet::unroll`], one entry per step.
#[derive(Debug, Default)]
pub struct Unrolled {
    pub actions: Vec<Vec<usize>>,
    /// `[K]` log-probabilities of the taken actions.
    pub logp: Vec<Var>,
    /// `[K]` policy entropies.
    pub entropy: Vec<Var>,
    /// `[K]` critic values.
    pub values: Vec<Var>,
}

/// Export format of one scanpath.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanpathRecord {
    pub image: String,
    pub k: usize,
    pub indices: Vec<usize>,
    pub yaw_pitch: Vec<[f64; 2]>,
    pub score: f64,
}

impl ScanpathRecord {
    pub fn new(image: &str, k: usize, indices: &[usize], grid: &ViewportGrid, score: f64) -> Self {
        Self {
            image: image.to_string(),
            k,
            indices: indices.to_vec(),
            yaw_pitch: indices.iter().map(|&j| [grid.get(j).yaw, grid.get(j).pitch]).collect(),
            score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVec;
    use crate::testutil::{fd_grad, rel_error, rng};
    use rand::Rng;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig { feature_dim: 4, hidden_dim: 3, score_dim: 3, gru_layers: 2, critic_hidden: 3, mask_revisits: true }
    }

    fn random_bank(r: &mut impl Rng, d: usize, x: usize) -> FeatureBank {
        let mut v = || FeatureVec(Tensor::vector((0..d).map(|_| r.random_range(-1.0..1.0)).collect()));
        let g = v();
        let views: Vec<FeatureVec> = (0..x).map(|_| v()).collect();
        FeatureBank::new(&g, &views).unwrap()
    }

    fn set(params: &mut ParameterSet, name: &str, data: Vec<f64>) {
        let id = params.id(name).unwrap();
        params.value_mut(id).data_mut().copy_from_slice(&data);
    }

    fn zero_all(params: &mut ParameterSet) {
        for id in params.ids().collect::<Vec<_>>() {
            params.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let net = PolicyNet::init(&cfg, &mut p, &mut rng(1)).unwrap();
        zero_all(&mut p);
        let h = Tensor::vector(vec![0.4, -1.0, 2.0]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        let out = net.gru_update(&p, 0, &h, &x).unwrap();
        assert_eq!(out.data(), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let net = PolicyNet::init(&cfg, &mut p, &mut rng(2)).unwrap();
        set(&mut p, "policy.gru0.b_z", vec![-800.0; 3]);
        let h = Tensor::vector(vec![0.4, -1.0, 2.0]);
        let x = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(net.gru_update(&p, 0, &h, &x).unwrap(), h);
        assert!(net.gru_update(&p, 5, &h, &x).is_err());
    }

    #[test]
    fn two_viewport_hand_logits() {
        let cfg = PolicyConfig { feature_dim: 1, hidden_dim: 1, score_dim: 1, gru_layers: 1, critic_hidden: 1, mask_revisits: true };
        let mut p = ParameterSet::new();
        let net = PolicyNet::init(&cfg, &mut p, &mut rng(3)).unwrap();
        set(&mut p, "policy.w_h", vec![0.5]);
        set(&mut p, "policy.w_g", vec![-0.25]);
        set(&mut p, "policy.w_f", vec![2.0]);
        set(&mut p, "policy.b", vec![0.1]);
        set(&mut p, "policy.v", vec![1.5]);
        let g = FeatureVec(Tensor::vector(vec![0.8]));
        let views = [FeatureVec(Tensor::vector(vec![0.3])), FeatureVec(Tensor::vector(vec![-0.7]))];
        let bank = FeatureBank::new(&g, &views).unwrap();
        let h = Tensor::vector(vec![0.6]);
        let z = net.score_viewports(&p, &h, &bank, &[0.0, 0.0]).unwrap();
        let expect = |f: f64| 1.5 * (0.5 * 0.6 + -0.25 * 0.8 + 2.0 * f + 0.1f64).tanh();
        assert!((z.data()[0] - expect(0.3)).abs() < 1e-12);
        assert!((z.data()[1] - expect(-0.7)).abs() < 1e-12);
        let zm = net.score_viewports(&p, &h, &bank, &[f64::NEG_INFINITY, 0.0]).unwrap();
        let probs = crate::diffcore::softmax(zm.data()).unwrap();
        assert_eq!(probs, vec![0.0, 1.0]);
        assert!(net.score_viewports(&p, &h, &bank, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn equal_features_give_uniform_policy() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let net = PolicyNet::init(&cfg, &mut p, &mut rng(4)).unwrap();
        let f = FeatureVec(Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]));
        let bank = FeatureBank::new(&f, &vec![f.clone(); 6]).unwrap();
        let z = net.score_viewports(&p, &Tensor::vector(vec![0.5, 0.1, -0.2]), &bank, &[0.0; 6]).unwrap();
        let probs = crate::diffcore::softmax(z.data()).unwrap();
        assert!(probs.iter().all(|&q| (q - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn dominant_feature_wins_the_first_step() {
        let cfg = PolicyConfig { feature_dim: 2, hidden_dim: 2, score_dim: 1, gru_layers: 1, critic_hidden: 2, mask_revisits: true };
        let mut p = ParameterSet::new();
        let net = PolicyNet::init(&cfg, &mut p, &mut rng(5)).unwrap();
        set(&mut p, "policy.w_h", vec![0.0, 0.0]);
        set(&mut p, "policy.w_g", vec![0.0, 0.0]);
        set(&mut p, "policy.w_f", vec![1.0, 0.0]);
        set(&mut p, "policy.v", vec![10.0]);
        let g = FeatureVec(Tensor::vector(vec![0.0, 0.0]));
        let mut views = vec![FeatureVec(Tensor::vector(vec![-1.0, 0.5])); 8];
        views[5] = FeatureVec(Tensor::vector(vec![1.0, 0.5]));
        let bank = FeatureBank::new(&g, &views).unwrap();
        let z = net.score_viewports(&p, &Tensor::zeros(&[2]), &bank, &[0.0; 8]).unwrap();
        let probs = crate::diffcore::softmax(z.data()).unwrap();
        assert!(probs[5] > 0.9);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut r = rng(6);
        let hits = (0..200).filter(|_| net.select_initial(&p, &bank, &mut r).unwrap() == 5).count();
        assert!(hits > 160);
    }

    #[test]
    fn batched_unroll_matches_single_path_steps() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let mut r = rng(7);
        let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
        let bank = random_bank(&mut r, 4, 6);
        let eps = net.rollout(&p, &bank, 3, 5, &mut rng(8), ActionMode::Greedy).unwrap();
        let mut state = net.initial_state(&bank);
        for s in 0..5 {
            let (a, lp, v, next) = net.step(&p, &state, &bank, &mut rng(0), MaskPolicy::Revisits, ActionMode::Greedy).unwrap();
            for ep in &eps {
                assert_eq!(ep.path.indices[s], a);
                assert!((ep.path.log_probs[s] - lp).abs() < 1e-12);
                assert!((ep.values[s] - v).abs() < 1e-12);
            }
            assert_eq!(next.t, s + 1);
            assert_eq!(next.visited.len(), s + 1);
            state = next;
        }
    }

    #[test]
    fn revisit_mask_prevents_repeats() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let mut r = rng(10);
        let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
        // a sharply peaked policy makes repeats likely without the mask
        set(&mut p, "policy.v", vec![25.0, -25.0, 25.0]);
        let bank = random_bank(&mut r, 4, 8);
        for _ in 0..200 {
            let eps = net.rollout(&p, &bank, 5, 8, &mut r, ActionMode::Sample).unwrap();
            for ep in eps {
                let mut seen = ep.path.indices.clone();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), 8);
                assert!(ep.path.log_probs.iter().all(|&l| l <= 0.0));
            }
        }
        assert!(net.rollout(&p, &bank, 1, 9, &mut r, ActionMode::Sample).is_err());
    }

    #[test]
    fn unmasked_policy_may_revisit() {
        let cfg = PolicyConfig { mask_revisits: false, ..small_cfg() };
        let mut p = ParameterSet::new();
        let mut r = rng(11);
        let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
        let bank = random_bank(&mut r, 4, 2);
        let eps = net.rollout(&p, &bank, 4, 6, &mut r, ActionMode::Sample).unwrap();
        assert!(eps.iter().all(|e| e.path.indices.len() == 6));
    }

    #[test]
    fn greedy_and_seeded_rollouts_are_reproducible() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let mut r = rng(12);
        let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
        let bank = random_bank(&mut r, 4, 6);
        let a = net.rollout(&p, &bank, 3, 5, &mut rng(1), ActionMode::Greedy).unwrap();
        let b = net.rollout(&p, &bank, 3, 5, &mut rng(2), ActionMode::Greedy).unwrap();
        assert_eq!(a, b);
        let c = net.rollout(&p, &bank, 3, 5, &mut rng(3), ActionMode::Sample).unwrap();
        let d = net.rollout(&p, &bank, 3, 5, &mut rng(3), ActionMode::Sample).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[f64::NEG_INFINITY, -1.0]), 1);
    }

    #[test]
    fn masked_entries_are_never_sampled() {
        let lp = crate::diffcore::log_softmax(&[0.0, f64::NEG_INFINITY, 3.0, f64::NEG_INFINITY]).unwrap();
        let mut r = rng(13);
        for _ in 0..100_000 {
            let j = sample_categorical(&lp, &mut r).unwrap();
            assert!(j == 0 || j == 2);
        }
        assert!(sample_categorical(&[f64::NEG_INFINITY; 3], &mut r).is_err());
    }

    #[test]
    fn critic_ignores_candidate_features() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        let mut r = rng(14);
        let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
        let bank = random_bank(&mut r, 4, 6);
        let mut other = random_bank(&mut r, 4, 6);
        other.global = bank.global.clone();
        let a = net.rollout(&p, &bank, 1, 1, &mut rng(1), ActionMode::Greedy).unwrap();
        let b = net.rollout(&p, &other, 1, 1, &mut rng(1), ActionMode::Greedy).unwrap();
        assert_eq!(a[0].values, b[0].values);
    }

    /// Loss touching every policy and critic parameter through a two-step
    /// unroll with fixed actions.
    fn probe_loss(net: &PolicyNet, tape: &mut Tape, p: &ParameterSet, bank: &FeatureBank) -> Var {
        let acts = [vec![1, 4], vec![0, 2], vec![3, 3]];
        let un = net.unroll(tape, p, bank, 2, 3, |s, _| Ok(acts[s].clone())).unwrap();
        let mut terms = Vec::new();
        for s in 0..3 {
            terms.push(tape.sum(un.logp[s]));
            let e = tape.sum(un.entropy[s]);
            terms.push(tape.scale(e, 0.3));
            let v = tape.square(un.values[s]);
            terms.push(tape.sum(v));
        }
        tape.add_all(&terms).unwrap()
    }

    #[test]
    fn unroll_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut r = rng(15);
        for _ in 0..5 {
            let mut p = ParameterSet::new();
            let net = PolicyNet::init(&cfg, &mut p, &mut r).unwrap();
            for id in p.ids().collect::<Vec<_>>() {
                p.value_mut(id).data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.8..0.8));
            }
            let bank = random_bank(&mut r, 4, 5);
            p.zero_grad();
            let mut tape = Tape::new();
            let loss = probe_loss(&net, &mut tape, &p, &bank);
            tape.backward(loss, &mut p).unwrap();
            let analytic = p.flat_grads();
            let numeric = fd_grad(&mut p, 1e-5, |q| {
                let mut t = Tape::new();
                let l = probe_loss(&net, &mut t, q, &bank);
                t.scalar(l)
            });
            let err = rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn bind_rejects_wrong_shapes() {
        let cfg = small_cfg();
        let mut p = ParameterSet::new();
        PolicyNet::init(&cfg, &mut p, &mut rng(16)).unwrap();
        let other = PolicyConfig { hidden_dim: 5, ..cfg };
        match PolicyNet::bind(&other, &p) {
            Err(Error::CheckpointIncompatible { entry, .. }) => assert_eq!(entry, "policy.gru0.w_z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn record_serializes_expected_keys() {
        let grid = crate::sphere::build_grid(8, 4, 90.0).unwrap();
        let rec = ScanpathRecord::new("a.png", 0, &[0, 9], &grid, 55.0);
        let v: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for key in ["image", "k", "indices", "yaw_pitch", "score"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(rec.yaw_pitch[1], [grid.get(9).yaw, grid.get(9).pitch]);
    }

    mod props {
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_of_unmasked_logits_keeps_distribution(
                z in prop::collection::vec(-10.0f64..10.0, 2..12),
                masked in prop::collection::vec(any::<bool>(), 12),
                c in -40.0f64..40.0,
            ) {
                let mut z = z;
                let n = z.len();
                for j in 1..n {
                    if masked[j] {
                        z[j] = f64::NEG_INFINITY;
                    }
                }
                let p = crate::diffcore::softmax(&z).unwrap();
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let q = crate::diffcore::softmax(&shifted).unwrap();
                let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
                prop_assert!(tv < 1e-12);
                for j in 0..n {
                    if z[j] == f64::NEG_INFINITY {
                        prop_assert_eq!(p[j], 0.0);
                    }
                }
            }
        }
    }
}
