//! Policy and assessor together, with their checkpoint container.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assessor::{Assessor, AssessorConfig};
use crate::diffcore::{checkpoint, ParameterSet, Tensor};
use crate::env::derive_seed;
use crate::error::{Error, Result};
use crate::features::FeatureBank;
use crate::policy::{ActionMode, Episode, PolicyConfig, PolicyNet};

#[derive(Clone, Debug)]
pub struct Model {
    pub policy: PolicyNet,
    pub policy_params: ParameterSet,
    pub assessor: Assessor,
    pub assessor_params: ParameterSet,
}

/// Image-level prediction from `K` scanpaths.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub q_hat: f64,
    pub per_path: Vec<f64>,
    pub paths: Vec<Vec<usize>>,
}

impl Model {
    pub fn init(pcfg: &PolicyConfig, acfg: &AssessorConfig, seed: u64) -> Result<Self> {
        if pcfg.feature_dim != acfg.feature_dim {
            return Err(Error::Config(format!(
                "policy.feature_dim = {} but assessor.feature_dim = {}",
                pcfg.feature_dim, acfg.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1417]));
        let mut policy_params = ParameterSet::new();
        let policy = PolicyNet::init(pcfg, &mut policy_params, &mut rng)?;
        let mut assessor_params = ParameterSet::new();
        let assessor = Assessor::init(acfg, &mut assessor_params, &mut rng)?;
        Ok(Self { policy, policy_params, assessor, assessor_params })
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.policy_params.entries();
        out.extend(self.assessor_params.entries());
        out
    }

    /// Restores from checkpoint entries; any name or shape disagreement with
    /// the configured architecture names the offending entry.
    pub fn from_entries(pcfg: &PolicyConfig, acfg: &AssessorConfig, entries: &[(String, Tensor)]) -> Result<Self> {
        let mut m = Self::init(pcfg, acfg, 0)?;
        let (pol, rest): (Vec<_>, Vec<_>) = entries.iter().cloned().partition(|(n, _)| n.starts_with("policy.") || n.starts_with("critic."));
        let (ass, stray): (Vec<_>, Vec<_>) = rest.into_iter().partition(|(n, _)| n.starts_with("assessor."));
        if let Some((name, _)) = stray.first() {
            return Err(Error::CheckpointIncompatible { entry: name.clone(), detail: "not present in the model".into() });
        }
        m.policy_params.load_entries(&pol)?;
        m.assessor_params.load_entries(&ass)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.entries())
    }

    pub fn load(path: &Path, pcfg: &PolicyConfig, acfg: &AssessorConfig) -> Result<Self> {
        Self::from_entries(pcfg, acfg, &checkpoint::load(path)?)
    }

    pub fn scanpaths(&self, bank: &FeatureBank, k: usize, t: usize, seed: u64, mode: ActionMode) -> Result<Vec<Episode>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.policy.rollout(&self.policy_params, bank, k, t, &mut rng, mode)
    }

    pub fn predict(&self, bank: &FeatureBank, k: usize, t: usize, seed: u64, mode: ActionMode) -> Result<Prediction> {
        let paths: Vec<Vec<usize>> = self.scanpaths(bank, k, t, seed, mode)?.into_iter().map(|e| e.path.indices).collect();
        let (q_hat, per_path) = self.assessor.predict_image(&self.assessor_params, bank, &paths)?;
        Ok(Prediction { q_hat, per_path, paths })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfgs() -> (PolicyConfig, AssessorConfig) {
        let p = PolicyConfig { feature_dim: 6, hidden_dim: 5, score_dim: 4, gru_layers: 2, critic_hidden: 3, ..PolicyConfig::default() };
        let a = AssessorConfig { feature_dim: 6, attn_dim: 4, mlp_hidden: 3, ..AssessorConfig::default() };
        (p, a)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (p, a) = cfgs();
        let m = Model::init(&p, &a, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path, &p, &a).unwrap();
        assert_eq!(back.entries(), m.entries());
    }

    #[test]
    fn mismatched_architecture_names_the_entry() {
        let (p, a) = cfgs();
        let m = Model::init(&p, &a, 1).unwrap();
        let wider = AssessorConfig { attn_dim: 7, ..a.clone() };
        match Model::from_entries(&p, &wider, &m.entries()) {
            Err(Error::CheckpointIncompatible { entry, .. }) => assert_eq!(entry, "assessor.w_p"),
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = m.entries();
        extra.push(("bogus".into(), Tensor::scalar(0.0)));
        assert!(matches!(Model::from_entries(&p, &a, &extra), Err(Error::CheckpointIncompatible { entry, .. }) if entry == "bogus"));
        let bad = AssessorConfig { feature_dim: 5, ..a };
        assert!(matches!(Model::init(&p, &bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn prediction_is_mean_of_paths() {
        let (p, a) = cfgs();
        let m = Model::init(&p, &a, 2).unwrap();
        let g = crate::features::FeatureVec(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1]));
        let views: Vec<_> = (0..10)
            .map(|j| crate::features::FeatureVec(Tensor::vector((0..6).map(|i| ((i * 7 + j * 3) % 5) as f64 - 2.0).collect())))
            .collect();
        let bank = FeatureBank::new(&g, &views).unwrap();
        let pred = m.predict(&bank, 4, 3, 9, ActionMode::Sample).unwrap();
        assert_eq!(pred.paths.len(), 4);
        let mean = pred.per_path.iter().sum::<f64>() / 4.0;
        assert!((pred.q_hat - mean).abs() < 1e-12);
        assert_eq!(pred, m.predict(&bank, 4, 3, 9, ActionMode::Sample).unwrap());
    }
}
