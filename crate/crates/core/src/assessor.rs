//! Quality assessor: attention pooling of the viewport features along a
//! scanpath, a tanh MLP on the pooled vector and the global feature, and
//! averaging over scanpaths.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureBank, FeatureVec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMapping {
    /// `100 * sigmoid(raw)`.
    Sigmoid100,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssessorConfig {
    pub feature_dim: usize,
    pub attn_dim: usize,
    pub mlp_hidden: usize,
    pub output: OutputMapping,
}

impl Default for AssessorConfig {
    fn default() -> Self {
        Self { feature_dim: 64, attn_dim: 64, mlp_hidden: 64, output: OutputMapping::Sigmoid100 }
    }
}

impl AssessorConfig {
    pub fn validate(&self) -> Result<()> {
        Assessor::check(self)
    }
}

#[derive(Clone, Debug)]
pub struct Assessor {
    cfg: AssessorConfig,
    w_p: ParamId,
    w_g2: ParamId,
    v_a: ParamId,
    w1_m: ParamId,
    w1_g: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn layout(cfg: &AssessorConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, a, c) = (cfg.feature_dim, cfg.attn_dim, cfg.mlp_hidden);
    vec![
        ("assessor.w_p", vec![a, d]),
        ("assessor.w_g2", vec![a, d]),
        ("assessor.v_a", vec![a]),
        ("assessor.w1_m", vec![c, d]),
        ("assessor.w1_g", vec![c, d]),
        ("assessor.b1", vec![c]),
        ("assessor.w2", vec![1, c]),
        ("assessor.b2", vec![1]),
    ]
}

impl Assessor {
    pub fn init(cfg: &AssessorConfig, params: &mut ParameterSet, rng: &mut impl Rng) -> Result<Self> {
        Self::check(cfg)?;
        for (name, shape) in layout(cfg) {
            match name {
                "assessor.b1" => params.insert(name, Tensor::zeros(&shape))?,
                // raw outputs start at the middle of the label range
                "assessor.b2" => {
                    let start = if cfg.output == OutputMapping::Raw { 50.0 } else { 0.0 };
                    params.insert(name, Tensor::vector(vec![start]))?
                }
                _ => {
                    let fan_in = *shape.last().expect("non-empty shape");
                    params.insert_uniform(name, &shape, 1.0 / (fan_in as f64).sqrt(), rng)?
                }
            };
        }
        Self::bind(cfg, params)
    }

    fn check(cfg: &AssessorConfig) -> Result<()> {
        if cfg.feature_dim == 0 || cfg.attn_dim == 0 || cfg.mlp_hidden == 0 {
            return Err(Error::Config("assessor dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn bind(cfg: &AssessorConfig, params: &ParameterSet) -> Result<Self> {
        Self::check(cfg)?;
        let ids = layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let id = params.id(name).ok_or_else(|| Error::CheckpointIncompatible {
                    entry: name.to_string(),
                    detail: "missing".into(),
                })?;
                if params.value(id).shape() != shape.as_slice() {
                    return Err(Error::CheckpointIncompatible {
                        entry: name.to_string(),
                        detail: format!("shape {:?}, expected {:?}", params.value(id).shape(), shape),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            w_p: ids[0],
            w_g2: ids[1],
            v_a: ids[2],
            w1_m: ids[3],
            w1_g: ids[4],
            b1: ids[5],
            w2: ids[6],
            b2: ids[7],
        })
    }

    pub fn config(&self) -> &AssessorConfig {
        &self.cfg
    }

    /// Pools every path at once. `paths` must share one length `T`.
    /// Returns pooled vectors `[d x K]` and weights `[K x T]`.
    pub fn pool_batch(&self, tape: &mut Tape, params: &ParameterSet, bank: &FeatureBank, paths: &[Vec<usize>]) -> Result<(Var, Var)> {
        let t = paths.first().map_or(0, Vec::len);
        if t == 0 || paths.iter().any(|p| p.len() != t) {
            return Err(Error::invalid("scanpaths must be non-empty and of equal length"));
        }
        if bank.dim() != self.cfg.feature_dim {
            return Err(Error::contract(format!(
                "feature dimension {} but assessor expects {}",
                bank.dim(),
                self.cfg.feature_dim
            )));
        }
        let k = paths.len();
        let flat: Vec<usize> = paths.iter().flatten().copied().collect();
        let f = tape.constant(bank.viewports.clone());
        let sel = tape.select_cols(f, &flat)?;
        let g = tape.constant(bank.global.clone());
        let m = self.pool_columns(tape, params, sel, g, k, t)?;
        Ok(m)
    }

    fn pool_columns(&self, tape: &mut Tape, params: &ParameterSet, sel: Var, g: Var, k: usize, t: usize) -> Result<(Var, Var)> {
        let w_p = tape.param(params, self.w_p);
        let w_g2 = tape.param(params, self.w_g2);
        let v_a = tape.param(params, self.v_a);
        let wf = tape.matmul(w_p, sel)?;
        let wg = tape.matvec(w_g2, g)?;
        let a = tape.add_col(wf, wg)?;
        let a = tape.tanh(a);
        let v = tape.reshape(v_a, &[1, self.cfg.attn_dim])?;
        let u = tape.matmul(v, a)?;
        let u = tape.reshape(u, &[k, t])?;
        let alpha = tape.softmax_rows(u)?;
        let m = tape.group_combine(sel, alpha)?;
        Ok((m, alpha))
    }

    fn head(&self, tape: &mut Tape, params: &ParameterSet, m: Var, g: Var) -> Result<Var> {
        let k = tape.value(m).cols();
        let w1m = tape.param(params, self.w1_m);
        let w1g = tape.param(params, self.w1_g);
        let b1 = tape.param(params, self.b1);
        let gt = tape.matvec(w1g, g)?;
        let gt = tape.add(gt, b1)?;
        let a = tape.matmul(w1m, m)?;
        let a = tape.add_col(a, gt)?;
        let a = tape.tanh(a);
        let w2 = tape.param(params, self.w2);
        let b2 = tape.param(params, self.b2);
        let y = tape.matmul(w2, a)?;
        let y = tape.add(y, b2)?;
        let y = tape.reshape(y, &[k])?;
        Ok(match self.cfg.output {
            OutputMapping::Sigmoid100 => {
                let s = tape.sigmoid(y);
                tape.scale(s, 100.0)
            }
            OutputMapping::Raw => y,
        })
    }

    /// Per-path scores `[K]` on the tape.
    pub fn score_paths(&self, tape: &mut Tape, params: &ParameterSet, bank: &FeatureBank, paths: &[Vec<usize>]) -> Result<Var> {
        let (m, _) = self.pool_batch(tape, params, bank, paths)?;
        let g = tape.constant(bank.global.clone());
        self.head(tape, params, m, g)
    }

    /// Image score: the mean of the per-path scores.
    pub fn score_image(&self, tape: &mut Tape, params: &ParameterSet, bank: &FeatureBank, paths: &[Vec<usize>]) -> Result<Var> {
        let s = self.score_paths(tape, params, bank, paths)?;
        Ok(tape.mean(s))
    }

    /// Attention weights over `feats` and the pooled vector.
    pub fn attention_pool(&self, params: &ParameterSet, feats: &[FeatureVec], g: &FeatureVec) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let (sel, gv) = self.constants(&mut tape, feats, g)?;
        let (m, alpha) = self.pool_columns(&mut tape, params, sel, gv, 1, feats.len())?;
        Ok((Tensor::vector(tape.value(m).data().to_vec()), tape.value(alpha).data().to_vec()))
    }

    fn constants(&self, tape: &mut Tape, feats: &[FeatureVec], g: &FeatureVec) -> Result<(Var, Var)> {
        if feats.is_empty() {
            return Err(Error::invalid("attention pooling needs T >= 1"));
        }
        let cols: Vec<&[f64]> = feats.iter().map(|f| f.values()).collect();
        let sel = tape.constant(Tensor::from_columns(&cols)?);
        let gv = tape.constant(g.0.clone());
        Ok((sel, gv))
    }

    pub fn predict_scanpath(&self, params: &ParameterSet, feats: &[FeatureVec], g: &FeatureVec) -> Result<f64> {
        let mut tape = Tape::new();
        let (sel, gv) = self.constants(&mut tape, feats, g)?;
        let (m, _) = self.pool_columns(&mut tape, params, sel, gv, 1, feats.len())?;
        let q = self.head(&mut tape, params, m, gv)?;
        Ok(tape.value(q).data()[0])
    }

    /// Mean score over `paths` and the per-path scores.
    pub fn predict_image(&self, params: &ParameterSet, bank: &FeatureBank, paths: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
        if paths.is_empty() {
            return Err(Error::invalid("prediction needs K >= 1"));
        }
        let mut tape = Tape::new();
        let s = self.score_paths(&mut tape, params, bank, paths)?;
        let per_path = tape.value(s).data().to_vec();
        let q = per_path.iter().sum::<f64>() / per_path.len() as f64;
        Ok((q, per_path))
    }
}

/// Per-image prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    #[serde(rename = "Q_hat")]
    pub q_hat: f64,
    pub per_path: Vec<f64>,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Label, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mos: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{fd_grad, rel_error, rng};

    fn cfg(d: usize) -> AssessorConfig {
        AssessorConfig { feature_dim: d, attn_dim: 3, mlp_hidden: 4, output: OutputMapping::Sigmoid100 }
    }

    fn fv(v: &[f64]) -> FeatureVec {
        FeatureVec(Tensor::vector(v.to_vec()))
    }

    fn random_fv(r: &mut impl Rng, d: usize) -> FeatureVec {
        FeatureVec(Tensor::vector((0..d).map(|_| r.random_range(-1.0..1.0)).collect()))
    }

    fn set(p: &mut ParameterSet, name: &str, v: &[f64]) {
        let id = p.id(name).unwrap();
        p.value_mut(id).data_mut().copy_from_slice(v);
    }

    #[test]
    fn identical_features_pool_uniformly() {
        let mut p = ParameterSet::new();
        let a = Assessor::init(&cfg(3), &mut p, &mut rng(1)).unwrap();
        let f = fv(&[0.2, -0.4, 0.9]);
        let (m, alpha) = a.attention_pool(&p, &[f.clone(), f.clone(), f.clone(), f.clone()], &fv(&[1.0, 0.0, 0.0])).unwrap();
        assert!(alpha.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        for (x, y) in m.data().iter().zip(f.values()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_hand_weights() {
        let c = AssessorConfig { feature_dim: 1, attn_dim: 1, mlp_hidden: 1, output: OutputMapping::Sigmoid100 };
        let mut p = ParameterSet::new();
        let a = Assessor::init(&c, &mut p, &mut rng(2)).unwrap();
        set(&mut p, "assessor.w_p", &[0.7]);
        set(&mut p, "assessor.w_g2", &[-0.2]);
        set(&mut p, "assessor.v_a", &[1.3]);
        let (f1, f2, g) = (0.5, -1.5, 0.4);
        let (_, alpha) = a.attention_pool(&p, &[fv(&[f1]), fv(&[f2])], &fv(&[g])).unwrap();
        let u = |f: f64| 1.3 * (0.7 * f - 0.2 * g).tanh();
        let (e1, e2) = (u(f1).exp(), u(f2).exp());
        assert!((alpha[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((alpha[1] - e2 / (e1 + e2)).abs() < 1e-12);
    }

    #[test]
    fn dominant_pool_score_saturates() {
        let c = AssessorConfig { feature_dim: 1, attn_dim: 1, mlp_hidden: 1, output: OutputMapping::Sigmoid100 };
        let mut p = ParameterSet::new();
        let a = Assessor::init(&c, &mut p, &mut rng(3)).unwrap();
        set(&mut p, "assessor.w_p", &[50.0]);
        set(&mut p, "assessor.w_g2", &[0.0]);
        set(&mut p, "assessor.v_a", &[16.0]);
        // scores 16 tanh(50 f): +16 versus -16, a gap of 32
        let (_, alpha) = a.attention_pool(&p, &[fv(&[-1.0]), fv(&[1.0]), fv(&[-1.0])], &fv(&[0.0])).unwrap();
        assert!(alpha[1] > 1.0 - 1e-12);
    }

    #[test]
    fn predictions_stay_in_range_and_average() {
        let mut p = ParameterSet::new();
        let mut r = rng(4);
        let a = Assessor::init(&cfg(3), &mut p, &mut r).unwrap();
        set(&mut p, "assessor.w2", &[40.0, -30.0, 25.0, 60.0]);
        let views: Vec<FeatureVec> = (0..6).map(|_| random_fv(&mut r, 3)).collect();
        let g = random_fv(&mut r, 3);
        let bank = FeatureBank::new(&g, &views).unwrap();
        let paths = vec![vec![0, 1, 2], vec![3, 4, 5], vec![5, 0, 2]];
        let (q, per) = a.predict_image(&p, &bank, &paths).unwrap();
        assert!(per.iter().all(|&s| (0.0..=100.0).contains(&s)));
        assert!((q - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        for (k, path) in paths.iter().enumerate() {
            let feats: Vec<FeatureVec> = path.iter().map(|&j| views[j].clone()).collect();
            let single = a.predict_scanpath(&p, &feats, &g).unwrap();
            assert!((single - per[k]).abs() < 1e-12);
        }
        let (q1, _) = a.predict_image(&p, &bank, &paths[..1]).unwrap();
        assert_eq!(q1, per[0]);
        let (qs, _) = a.predict_image(&p, &bank, &[paths[1].clone(), paths[1].clone()]).unwrap();
        assert!((qs - per[1]).abs() < 1e-12);
        let reversed: Vec<Vec<usize>> = paths.iter().rev().cloned().collect();
        let (_, per_rev) = a.predict_image(&p, &bank, &reversed).unwrap();
        let mut x = per.clone();
        let mut y = per_rev;
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        assert_eq!(x, y);
    }

    #[test]
    fn raw_mode_is_unbounded() {
        let c = AssessorConfig { output: OutputMapping::Raw, ..cfg(2) };
        let mut p = ParameterSet::new();
        let a = Assessor::init(&c, &mut p, &mut rng(5)).unwrap();
        set(&mut p, "assessor.b2", &[250.0]);
        let q = a.predict_scanpath(&p, &[fv(&[0.1, 0.2])], &fv(&[0.0, 0.0])).unwrap();
        assert!(q > 100.0);
    }

    fn probe(a: &Assessor, t: &mut Tape, p: &ParameterSet, bank: &FeatureBank) -> Var {
        let s = a.score_paths(t, p, bank, &[vec![0, 3, 1], vec![2, 2, 4]]).unwrap();
        let w = t.constant(Tensor::vector(vec![0.013, -0.021]));
        t.dot(s, w).unwrap()
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut r = rng(6);
        for _ in 0..5 {
            let mut p = ParameterSet::new();
            let a = Assessor::init(&cfg(3), &mut p, &mut r).unwrap();
            let views: Vec<FeatureVec> = (0..5).map(|_| random_fv(&mut r, 3)).collect();
            let bank = FeatureBank::new(&random_fv(&mut r, 3), &views).unwrap();
            p.zero_grad();
            let mut t = Tape::new();
            let l = probe(&a, &mut t, &p, &bank);
            t.backward(l, &mut p).unwrap();
            let analytic = p.flat_grads();
            let numeric = fd_grad(&mut p, 1e-5, |q| {
                let mut t = Tape::new();
                let l = probe(&a, &mut t, q, &bank);
                t.scalar(l)
            });
            let err = rel_error(&analytic, &numeric);
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn prediction_record_keys() {
        let rec = PredictionRecord { image: "x.png".into(), q_hat: 50.0, per_path: vec![40.0, 60.0], k: 2, t: 7, mos: None };
        let v = serde_json::to_value(&rec).unwrap();
        for key in ["image", "Q_hat", "per_path", "K", "T"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v.get("mos").is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_sum_to_one(vals in prop::collection::vec(-3.0f64..3.0, 2..24), seed in any::<u64>()) {
                let mut p = ParameterSet::new();
                let a = Assessor::init(&cfg(2), &mut p, &mut rng(seed)).unwrap();
                let feats: Vec<FeatureVec> = vals.chunks_exact(2).map(fv).collect();
                let (_, alpha) = a.attention_pool(&p, &feats, &fv(&[0.3, -0.3])).unwrap();
                prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn pooling_weights_are_shift_invariant(scores in prop::collection::vec(-20.0f64..20.0, 1..10), c in -30.0f64..30.0) {
                let a = crate::diffcore::softmax(&scores).unwrap();
                let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
                let b = crate::diffcore::softmax(&shifted).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
